//! Dense tensors and a tape-based reverse-mode differentiator, sized for a
//! small decoder-only transformer.
//!
//! Values live in [`Tensor`]. Computations are recorded on a [`Tape`] as
//! [`Var`] handles; [`Tape::backward`] returns gradients of a scalar with
//! respect to any set of recorded nodes, leaves or intermediates.

mod float;
pub mod gradcheck;
mod tape;
mod tensor;

pub use float::Float;
pub use gradcheck::finite_diff_gradient;
pub use tape::{softmax_in_place, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;
