use std::path::Path;

use nngp_core::error::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidParameter { .. } => CliError::Config(e.to_string()),
            CoreError::Data(_) | CoreError::Dimension { .. } => CliError::Data(e.to_string()),
            CoreError::Degenerate { .. }
            | CoreError::DegenerateChain(_)
            | CoreError::Numerical(_)
            | CoreError::Domain(_) => CliError::Numerical(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
