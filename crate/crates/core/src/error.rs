//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetaError {
    /// Operand shapes do not conform for the attempted operation.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("optimizer step: parameter at position {index} carries no gradient")]
    MissingGrad { index: usize },

    /// Checkpoint or config field disagrees with the data it is applied to.
    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    DimensionMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl DetaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DetaError::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, DetaError>;
