//! Minimal deterministic differentiable tensor core.
//!
//! Forward primitives record onto a [`Tape`]; `backward` fills gradient
//! buffers in reverse topological order; [`finite_diff_check`] is the
//! independent oracle used to verify every gradient in the crate.

mod check;
pub mod rng;
mod tape;
mod tensor;

pub use check::{finite_diff_check, ScalarFn};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("invalid tensor shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value in tensor of shape {0:?}")]
    NonFinite(Vec<usize>),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },
    #[error("expected scalar tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on an empty graph")]
    EmptyGraph,
    #[error("softmax over an empty (fully masked) set")]
    EmptySoftmax,
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidDropoutRate(f64),
    #[error("index {index} out of range for {size} rows")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("targets must be binary (0 or 1)")]
    NonBinaryTarget,
    #[error("function is not deterministic: two evaluations differ")]
    NonDeterministic,
}
