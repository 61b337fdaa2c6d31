use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index {index:?} out of range for shape {shape:?}")]
    IndexOutOfRange { index: [usize; 4], shape: [usize; 4] },

    #[error("element count overflows for shape {0:?}")]
    Overflow([usize; 4]),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid positions: {0}")]
    InvalidPositions(String),

    #[error("malformed data in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by the filesystem rather than by bad input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
