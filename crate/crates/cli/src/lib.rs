//! Library half of the `mct` binary: every subcommand is a function over
//! parsed arguments, so tests can drive the exact CLI code paths.

pub mod commands;

pub use commands::*;

use mct_core::MctError;

/// CLI-level errors carry the process exit code policy:
/// 1 usage, 2 data/format, 3 numerical failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(MctError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<MctError> for CliError {
    fn from(e: MctError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(MctError::Numerical(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
