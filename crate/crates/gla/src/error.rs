//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's documented precondition
    /// (shape mismatch, missing argument, out-of-range value).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced or received a NaN/infinite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Geometric estimation failed (too few points, degenerate configuration).
    #[error("degenerate geometry: {0}")]
    Geometry(String),

    /// A file did not match the expected binary or JSON layout.
    #[error("format error: {0}")]
    Format(String),

    /// Invalid run or network configuration.
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
