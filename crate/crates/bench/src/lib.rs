//! Analytic FLOP counts and wall-clock/allocation scaling runs comparing the
//! recurrent, full-FFT and chunked streaming SSM paths against a single-head
//! attention baseline.
//!
//! FLOP figures are an independent model of the sequence-mixing core only.
//! They are not end-to-end model FLOPs.

pub mod alloc;
pub mod attention;
pub mod flops;
pub mod scaling;

use thiserror::Error;

pub use alloc::{PeakAlloc, PeakWindow};
pub use attention::AttentionBaseline;
pub use flops::{count_flops, FlopShape, Method};
pub use scaling::{loglog_slope, run_scaling, write_csv, BenchRecord, ScalingConfig, CSV_HEADER};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark parameters: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] sts_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
