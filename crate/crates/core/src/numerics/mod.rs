//! Dense float64 tensors with tape-based reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value. Differentiable programs are recorded on a
//! [`Tape`] whose nodes are addressed by [`Var`] handles; calling
//! [`Tape::backward`] on a scalar node fills gradient buffers for every
//! reachable node that requires a gradient.

pub mod kernels;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use optim::{adamw_step, AdamState, AdamWConfig, Param, ParamStore};
pub use rng::RngState;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op} over an empty axis")]
    EmptyAxis { op: &'static str },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not require a gradient")]
    NoGradient,
    #[error("missing gradient for parameter(s): {}", .0.join(", "))]
    MissingGradient(Vec<String>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Numerically stable softmax of a slice.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(NumericsError::EmptyAxis { op: "softmax" });
    }
    let mut out = values.to_vec();
    kernels::softmax_in_place(&mut out);
    Ok(out)
}

/// Numerically stable log-softmax of a slice.
pub fn log_softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(NumericsError::EmptyAxis { op: "log_softmax" });
    }
    let lse = kernels::log_sum_exp(values);
    Ok(values.iter().map(|v| v - lse).collect())
}
