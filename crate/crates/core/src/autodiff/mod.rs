//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod tensor;

pub use graph::{log_sum_exp, Graph, Var};
pub use tensor::Tensor;
