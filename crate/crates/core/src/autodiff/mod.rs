//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations on attached tensors are appended to a [`Graph`]. [`grad`]
//! walks the graph backwards; every gradient rule is itself expressed with
//! recordable operations, so passing `create_graph = true` yields gradients
//! that can be differentiated again (Hessian-vector products, mixed
//! second derivatives, unrolled optimization).
//!
//! Only one-element tensors broadcast. Every operation checks its output
//! for NaN/Inf and fails instead of propagating it.

mod array;
mod backward;
mod check;
mod graph;
mod kernels;
mod ops;

pub use array::Array;
pub use backward::{grad, inject_fault, Fault, Gradients};
pub use check::{contract, finite_diff_grad, gradient, hvp, relative_error};
pub use graph::{Graph, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("gradient requested of non-scalar output with shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("tensors from different graphs combined")]
    GraphMismatch,
    #[error("tensor from graph generation {tensor} used after reset (now {graph})")]
    StaleTensor { tensor: u64, graph: u64 },
}

#[cfg(test)]
mod tests;
