//! Minimal reverse-mode automatic differentiation over 4-D tensors.

pub mod conv;
pub mod gradcheck;
mod graph;
mod optim;
mod param;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, Adam};
pub use param::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
