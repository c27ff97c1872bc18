use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
