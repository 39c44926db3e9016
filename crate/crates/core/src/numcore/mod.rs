//! Dense tensors, reverse-mode autodiff, Adam and finite-difference gradient checks.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, Coords, GradCheckReport, GRAD_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{BitRepr, ParamGrads, ParamId, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("target {target} outside 0..{classes}")]
    TargetOutOfRange { target: i64, classes: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

#[cfg(test)]
mod tests;
