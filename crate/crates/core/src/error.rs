use std::path::PathBuf;

use levt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed sequence: {0}")]
    Sequence(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("incompatible artifact: {0}")]
    Incompatible(String),
    #[error("corpus error in {path}: {detail}")]
    Corpus { path: PathBuf, detail: String },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
