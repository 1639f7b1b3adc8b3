//! Minimal neural-network toolkit: tensors, a reverse-mode tape, parameters and models.

mod graph;
mod models;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use models::{ConvNet, ConvNetArch, UNet, UNetArch};
pub use params::{AdamW, BoundParams, ParamId, ParamStore};
pub use tensor::Tensor;
