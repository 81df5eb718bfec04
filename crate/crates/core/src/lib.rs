//! Diagonal state-space sequence models with a transferable hidden state.
//!
//! The crate offers three evaluation paths over the same discretized system:
//!
//! * [`ssm::scan_recurrent`] / [`ssm::step`]: the step-by-step recurrence,
//!   used as the reference for everything else.
//! * [`kernel::eval_conv_path`]: FFT convolution with the output kernel, plus
//!   a per-position correction for a non-zero initial state and an explicit
//!   end-of-segment state computed with the state kernel.
//! * [`transfer::Session`]: a streaming engine that feeds fixed-size segments
//!   through the convolution path and carries the [`TransferState`] from one
//!   segment to the next, so arbitrarily long streams are evaluated in memory
//!   bounded by the segment length.

pub mod error;
pub mod kernel;
pub mod signal;
pub mod ssm;
pub mod transfer;

pub use error::{Error, Result};
pub use kernel::{
    conv_causal_fft, conv_causal_naive, eval_conv_path, eval_conv_path_with, materialize_kernels,
    ExponentConvention, KernelCache, KernelSet, SegmentEngine,
};
pub use num_complex::Complex64;
pub use signal::{relative_error, relative_error_complex, Signal};
pub use ssm::{
    discretize, init_s4d_lin, scan_recurrent, step, ContinuousParams, DiscreteParams, SsmConfig,
    TransferState,
};
pub use transfer::{
    bucketize_time, eval_chunked, load_state, plan_segments, save_state, Emission, ReadoutPolicy,
    SegmentPlan, Session, DEFAULT_TIME_BUCKETS,
};
