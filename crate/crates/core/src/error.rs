use alloc::string::String;
use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes}")]
    ShapeMismatch { op: &'static str, shapes: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward root is not a scalar node of this tape")]
    InvalidRoot,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("function is not deterministic: two evaluations differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: String) -> Self {
        Error::ShapeMismatch { op, shapes }
    }
}
