//! Minimal reverse-mode differentiation: dense matrices, a recording tape,
//! Adam, finite-difference gradient checking, and a tensor archive format.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use graph::{argmax_first, kl_bernoulli, sigmoid, softmax_with_temperature, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: [usize; 2], rhs: [usize; 2] },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("loss must be a 1x1 tensor, got {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
