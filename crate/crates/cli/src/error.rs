use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("verification failed")]
    VerificationFailed,

    #[error(transparent)]
    Model(#[from] sts_core::Error),

    #[error(transparent)]
    Bench(#[from] sts_bench::BenchError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for a failed verification, 2 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::VerificationFailed => 1,
            _ => 2,
        }
    }
}
