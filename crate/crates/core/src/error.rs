use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents do not line up for an operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A model or layer configuration violates one of its invariants.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values or a failed numeric check.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// A weight or tensor file is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("config digest mismatch: expected {expected}, file has {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
