//! Dense tensors, a reverse-mode tape, parameter storage and checkpoints.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use graph::{FocalParams, Gradients, Graph, Var};
pub use params::{ParamId, ParameterStore};
pub use tensor::Tensor;
