//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Vector/matrix shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A category, predicate, or element index is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid configuration or parameter value.
    #[error("configuration error: {0}")]
    Config(String),

    /// An enumeration or allocation guard was exceeded.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Degenerate geometry (empty boxes, zero-area frames).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A file could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// File format version does not match what this build reads.
    #[error("format version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    /// Training diverged or could not proceed; `epoch` is 0-based.
    #[error("training failed at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
