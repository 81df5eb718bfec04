//! Library side of the `sts` command: stream file format, run configuration,
//! synthetic stream generation, streaming evaluation with checkpoint/resume,
//! the equivalence verification suite and the benchmark wrapper.

pub mod config;
pub mod error;
pub mod gen;
pub mod run;
pub mod stream;
pub mod verify;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use gen::{generate, GenReport, SignalKind};
pub use run::{run_stream, RunOptions, RunSummary, CSV_HEADER};
pub use stream::{StreamHeader, StreamReader, StreamWriter};
pub use verify::{run_verify, VerifyOptions, VerifyReport};
