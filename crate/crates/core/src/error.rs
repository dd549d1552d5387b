use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the restoration library.
#[derive(Debug, Error)]
pub enum SfarlError {
    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("instance too large for dense check: side {side} > {limit}")]
    TooLarge { side: usize, limit: usize },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("unsupported model file version {found} (this build reads up to {supported})")]
    Version { found: u16, supported: u16 },

    #[error("truncated stream: {0}")]
    Truncated(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SfarlError>;

impl SfarlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SfarlError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        SfarlError::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
