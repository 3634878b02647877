use std::io;

use thiserror::Error;

pub type Result<T, E = AadError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AadError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite values in output of {layer}")]
    NonFinite { layer: String },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AadError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AadError::InvalidArgument(msg.into())
    }
}
