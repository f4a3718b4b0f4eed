//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! covering the layer set of the positioning network, plus optimizers.

mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use graph::{BatchStats, BnMode, Gradients, Graph, ParamId, Var, BN_EPS};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::Tensor;
