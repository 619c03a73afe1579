//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PtnetError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PtnetError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PtnetError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, PtnetError>;
