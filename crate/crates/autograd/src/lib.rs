//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The engine is a define-by-run tape ([`Graph`]) holding NCHW tensors. It
//! carries exactly the operator set needed by the restoration network, the
//! fixed feature extractors and the training losses: convolutions (strided,
//! dilated, deformable), pooling, bilinear resizing, channel attention
//! primitives, batched matrix products for non-local attention, and L1-style
//! reductions. All arithmetic is single-threaded and runs in a fixed order, so
//! identical inputs give bit-identical values and gradients.

mod graph;
mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
