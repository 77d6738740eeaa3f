//! Dense tensors, a reverse-mode computation record, and Adam.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
