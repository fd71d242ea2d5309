//! The `mimir` command-line engine: run configuration, data directories and
//! the phantom / project / cv / train / calibrate / predict / evaluate
//! commands built on `mimir-core`.

pub mod commands;
pub mod config;
pub mod data;

use mimir_core::MimirError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, configuration or paths; exit code 2.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Runtime(#[from] MimirError),

    /// A runtime failure that is not a single library error.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::Failed(_) => 1,
        }
    }
}
