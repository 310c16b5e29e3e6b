//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! All arithmetic is `f64`. A [`Graph`] records ops in creation order, which is
//! a topological order, and [`Graph::backward`] sweeps it in reverse.

mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{compare_coordinates, compare_coordinates_with_steps, grad_check, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    OutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    InvalidArgument(String),
}
