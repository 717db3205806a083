use std::path::PathBuf;

use dehaze_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DehazeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{key}: {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error("non-finite training loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
}

impl DehazeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DehazeError::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DehazeError::Invalid(msg.into())
    }
}

pub type Result<T, E = DehazeError> = std::result::Result<T, E>;
