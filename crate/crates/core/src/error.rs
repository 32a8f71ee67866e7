use std::path::PathBuf;

use megre_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic bytes {0:?}, expected \"MET1\"")]
    BadMagic([u8; 4]),
    #[error("file ends before header is complete")]
    TruncatedHeader,
    #[error("payload truncated inside array `{array}` (need {needed} bytes, {available} available)")]
    Truncated {
        array: String,
        needed: usize,
        available: usize,
    },
    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),
    #[error("unknown axis label `{0}`")]
    UnknownAxis(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("{0} trailing bytes after the last array")]
    TrailingBytes(usize),
    #[error("array `{0}` not found")]
    MissingArray(String),
    #[error("array `{name}` has dtype {found}, expected {expected}")]
    WrongDtype {
        name: String,
        found: &'static str,
        expected: &'static str,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (slice {slice}): {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        slice: usize,
        detail: String,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
