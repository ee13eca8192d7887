use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the PU training pipeline.
#[derive(Debug, Error)]
pub enum PuError {
    /// A configuration value violates its constraint. `key` names the offending setting.
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// Malformed input file; `offset` is the byte position where decoding failed.
    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An API was called out of order (e.g. backward before forward).
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = PuError> = std::result::Result<T, E>;

impl PuError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        PuError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PuError::Io {
            path: path.into(),
            source,
        }
    }
}
