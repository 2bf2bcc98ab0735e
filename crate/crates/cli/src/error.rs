use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or unknown configuration key; the message carries the key.
    #[error("config: {0}")]
    Config(abd_core::Error),

    #[error("usage: {0}")]
    Usage(String),

    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },

    #[error("{} check(s) failed: {}", .0.len(), .0.join(", "))]
    ChecksFailed(Vec<String>),

    #[error(transparent)]
    Core(abd_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 0 success, 1 check or metric failure, 2 usage or config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::Config(_) | CliError::Usage(_) | CliError::Read { .. } => 2,
            CliError::Core(_) | CliError::Csv(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<abd_core::Error> for CliError {
    fn from(e: abd_core::Error) -> Self {
        match e {
            abd_core::Error::UnknownKey(_) | abd_core::Error::InvalidValue { .. } => CliError::Config(e),
            other => CliError::Core(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
