//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up (matmul inner dims, kernel vs input, ...).
    #[error("dimension error: {0}")]
    Dim(String),

    /// Input value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An API precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Malformed dataset, manifest, or checkpoint content.
    #[error("data error: {0}")]
    Data(String),

    /// NaN/Inf escaped a numeric computation.
    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
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
}

pub type Result<T> = std::result::Result<T, Error>;
