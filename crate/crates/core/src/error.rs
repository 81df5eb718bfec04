use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Re(A) must be strictly negative for every diagonal entry.
    #[error("unstable system: Re(A[{channel}, {state}]) = {real} is not negative")]
    Stability {
        channel: usize,
        state: usize,
        real: f64,
    },

    #[error("non-finite value in {what} at timestep {index}")]
    Numeric { what: &'static str, index: u64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("segment plan: {0}")]
    Plan(String),

    #[error("session: {0}")]
    Session(String),

    #[error("checkpoint format: field `{field}`: {detail}")]
    Format { field: &'static str, detail: String },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
