//! Dense `f64` tensors and a small reverse-mode differentiation tape.
//!
//! Everything downstream (CTC heads, the compressor's averaging, the modality
//! adaptor, the toy encoder and decoder) is expressed with the primitives on
//! [`Graph`]. Gradients are exact up to floating point and are verified against
//! central finite differences by [`gradcheck`].

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{log_add, logsumexp, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
