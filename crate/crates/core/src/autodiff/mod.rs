//! Dense reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes; calling
//! [`Graph::backward`] on a single-element node returns the gradient with
//! respect to every [`Graph::leaf`] that contributed to it.

mod check;
mod graph;
mod tensor;

pub use check::{compare_gradients, gradient_check, GradCheckReport};
pub use graph::{sigmoid as sigmoid_value, softplus as softplus_value, Gradients, Graph, Op, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    Axis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: domain error, {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("backward root must be a single element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}
