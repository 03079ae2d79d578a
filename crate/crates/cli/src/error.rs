use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad or missing arguments; the binary exits with status 2.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] otfuse_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("config file {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),

    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn usage(message: impl Into<String>) -> Self {
        HarnessError::Usage(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_usage(&self) -> bool {
        matches!(self, HarnessError::Usage(_))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
