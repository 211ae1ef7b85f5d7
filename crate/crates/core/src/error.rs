//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Mathematical domain violation (log of non-positive, division by zero, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value showed up in a forward or backward pass.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse (value from another tape, empty point set, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad configuration or malformed input file.
    #[error("config error: {0}")]
    Config(String),

    /// Shape/dimension mismatch between artifacts.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
