use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::InvalidArgument(msg.into()))
}
