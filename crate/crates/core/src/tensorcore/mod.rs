//! Dense tensors and a reverse-mode autodiff tape.

pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use graph::{gelu_scalar, sigmoid_scalar, softplus_scalar, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
