use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum AmaaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("unsupported kernel size {0} (only 1 and 3 are supported)")]
    UnsupportedKernel(usize),

    #[error("invalid window size {0} (must be odd and >= 1)")]
    InvalidWindow(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("loss is undefined: {0}")]
    UndefinedLoss(String),

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },

    #[error("corrupt volume file {path:?} at byte offset {offset}: {reason}")]
    CorruptFile {
        path: PathBuf,
        offset: usize,
        reason: String,
    },

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AmaaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AmaaError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            AmaaError::Shape(_)
                | AmaaError::UnsupportedKernel(_)
                | AmaaError::InvalidWindow(_)
                | AmaaError::Config(_)
                | AmaaError::Contract(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, AmaaError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AmaaError::Shape(msg.into()))
}
