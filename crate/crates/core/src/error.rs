//! Error types shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor/layer shape disagreement.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration value (e.g. even conv kernel, bad head count).
    #[error("config error: {0}")]
    Config(String),

    /// API misuse: empty input, out-of-range step index, missing stats.
    #[error("usage error: {0}")]
    Usage(String),

    /// A non-finite value appeared where the numeric contract forbids it.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Malformed on-disk data; carries a line/field diagnostic.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn dimension(msg: impl Into<String>) -> Self {
        CoreError::Dimension(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        CoreError::Usage(msg.into())
    }
    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        CoreError::Parse { location: location.into(), message: message.into() }
    }
}
