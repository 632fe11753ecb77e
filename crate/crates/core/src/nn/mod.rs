//! Networks and optimization: MLPs, softmax with temperature, cross-entropy
//! and Adam.

mod adam;
mod functional;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use functional::{cross_entropy, softmax_with_temperature, PROB_FLOOR};
pub use mlp::Mlp;
