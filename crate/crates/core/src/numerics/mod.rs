//! Dense tensors and tape-based reverse-mode differentiation.

mod check;
mod graph;
pub mod kernels;
mod tensor;

pub use check::{grad_check, grad_check_many, GradCheckReport, DEFAULT_STEP};
pub use graph::{dropout, scaled_dot_attention, Graph, Var};
pub use tensor::Tensor;
