//! Minimal reverse-mode differentiation over 2-D `f64` tensors.
//!
//! A [`Graph`] records one forward pass. Every op appends a node, so node
//! order is a topological order and [`Graph::backward`] is a single reverse
//! sweep. Gradients accumulate into leaves that require them.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{analytic_grads, gradcheck, gradcheck_many, gradcheck_signed, FD_STEP};
pub use graph::{Axis, Graph, Var, PROB_CLAMP};
pub use tensor::Tensor;
