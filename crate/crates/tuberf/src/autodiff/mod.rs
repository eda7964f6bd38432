//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Scope is exactly what the radiance MLPs and losses need: 2-D matmul,
//! leading-batch broadcasting, the elementwise menu, compositing helpers
//! (exclusive cumulative sums), and patch extraction for the feature
//! extractor. A [`Tape`] is single-writer; independent tapes over a shared
//! frozen parameter snapshot may run in parallel.

mod checkpoint;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION};
pub use params::{adam_step, AdamState, ParamId, Params};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

pub(crate) use kernels::{matmul, sigmoid as sigmoid_scalar, softplus as softplus_scalar};
pub(crate) use tape::conv_out_dims;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}
