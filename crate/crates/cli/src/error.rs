use std::path::PathBuf;

use jers_core::CoreError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(CoreError::Config(_)) => EXIT_CONFIG,
            CliError::Core(CoreError::Format { .. }) => EXIT_FORMAT,
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_OTHER,
        }
    }
}
