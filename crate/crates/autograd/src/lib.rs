//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! The operator set is deliberately small: what an image-set generative model
//! with convolutional encoders, decoders and an autoregressive prior needs.
//! Graphs are generic over [`Element`] so the same model code can run in `f32`
//! for training and in `f64` for gradient checks.

mod element;
mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
pub mod selfcheck;
mod spectral;
mod tensor;

pub use element::Element;
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use spectral::{spectral_normalize, SpectralNormState, SIGMA_FLOOR};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op} at node {node}: {detail}")]
    Shape { op: &'static str, node: usize, detail: String },
    #[error("loss must hold a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
