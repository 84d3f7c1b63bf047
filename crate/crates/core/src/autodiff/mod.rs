//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{sigmoid, Graph, Var, LOG_CLAMP};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
