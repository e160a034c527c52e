//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch between operands; the message names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent dataset contents.
    #[error("data error: {0}")]
    Data(String),

    /// A coordinate fell outside every configured region under the reject policy.
    #[error("point ({lat}, {lon}) is outside every configured region")]
    OutOfRegion { lat: f64, lon: f64 },

    /// Persisted artifact could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite value produced where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse, e.g. a backward pass with a stale cache.
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
