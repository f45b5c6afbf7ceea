use std::path::PathBuf;

use mcbo_core::Error as CoreError;

/// Errors surfaced by the command-line front end, each with a stable exit
/// code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Format { .. } | CliError::Input(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    /// Map a core error raised while processing `context`.
    pub fn from_core(err: CoreError, context: &str) -> Self {
        match err {
            CoreError::InvalidConfig(msg) => CliError::Config(msg),
            e @ (CoreError::NumericalFailure { .. } | CoreError::NonFinite(_)) => {
                CliError::Numerical(format!("{context}: {e}"))
            }
            e => CliError::Input(format!("{context}: {e}")),
        }
    }
}

pub const EXIT_OK: i32 = 0;
