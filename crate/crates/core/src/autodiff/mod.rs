//! Reverse-mode differentiation over dense tensors.

mod finite_diff;
mod graph;
mod params;

pub use finite_diff::{finite_diff_gradient, max_relative_error};
pub use graph::{Graph, Var};
pub(crate) use graph::logsumexp_slice;
pub use params::{Gradients, ParamId, ParamStore};
