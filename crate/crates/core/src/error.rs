use std::path::PathBuf;

use mtl_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("{path}: {detail} (offset {offset})")]
    Parse {
        path: PathBuf,
        offset: usize,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, offset: usize, detail: impl Into<String>) -> Self {
        Self::Parse {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }
}
