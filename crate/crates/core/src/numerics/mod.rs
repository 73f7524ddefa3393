//! Dense `f64` tensors and tape-based reverse-mode differentiation.

mod finite_diff;
mod graph;
mod kernels;
mod tensor;

pub use finite_diff::{finite_diff_grad, max_relative_error, DEFAULT_STEP};
pub use graph::{Activation, Binary, Graph, Reduction, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use graph::sigmoid;

#[cfg(test)]
mod tests;
