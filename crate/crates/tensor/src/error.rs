use thiserror::Error;

use crate::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: data length {len} does not match shape {shape}")]
    DataLength {
        op: &'static str,
        shape: Shape,
        len: usize,
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{op}: normalization axis has size 0")]
    EmptyAxis { op: &'static str },

    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),

    #[error("graph is not topologically ordered at node {0}")]
    Cycle(usize),

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        TensorError::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
