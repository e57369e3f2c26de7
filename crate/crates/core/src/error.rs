use std::path::PathBuf;

use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is out of its valid range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A file or stream does not conform to its expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// A non-finite value surfaced where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// I/O failure tagged with the offending path.
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
