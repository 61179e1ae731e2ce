//! Minimal tensor library with tape-based reverse-mode differentiation.
//!
//! Every op validates shapes and refuses to emit non-finite values. Backward
//! walks the tape once in reverse and accumulates gradients in a fixed order,
//! so repeated runs are bit-identical.

mod graph;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{Init, ParamDef, ParamId, ParamKind, ParamRegistry, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub(crate) use scalar::{gemm, MatView};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

#[cfg(test)]
mod tests;
