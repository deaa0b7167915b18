//! Dense `f64` arrays and a reverse-mode tape covering the primitives used
//! by the model, plus a central-difference gradient checker.

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, relative_error, GradCheckError, GradCheckReport};
pub use tape::{sigmoid, Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds ({bound})")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
}
