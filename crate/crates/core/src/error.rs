use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulation engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, names or layouts that do not line up.
    #[error("structural error: {0}")]
    Structural(String),
    /// NaN/Inf encountered, or a loss that cannot be evaluated.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An API used out of order, e.g. backward on a consumed tape.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("partition error: {0}")]
    Partition(String),
    /// Malformed bytes in a file or blob.
    #[error("format error: {0}")]
    Format(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by non-finite values during training.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
