//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file content. `location` names the file plus the record or
    /// line index where parsing failed.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Numerically or structurally degenerate input (zero vector, zero
    /// variance, non-positive-definite matrix, one-class score set, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("recipe error: {0}")]
    Recipe(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
