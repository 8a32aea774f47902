//! Dense `f64` tensors, reverse-mode autodiff, AdamW and the cosine schedule.

mod gemm;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;


pub use gradcheck::{finite_difference_check, param_gradient_check};
pub use graph::{causal_mask, Graph, Var};
pub use optim::{cosine_lr, AdamWConfig, OptimizerState};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
