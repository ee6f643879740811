//! Dense `f64` tensors and a reverse-mode tape.
//!
//! The engine is deliberately small: eager forward ops append nodes to a
//! [`Graph`], `backward` walks the tape once in reverse creation order and
//! returns gradients for every named parameter. First-order only, no
//! broadcasting beyond the few explicit ops, deterministic down to the bit.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, NodeId, Op};
pub use params::{sgd_step, GradMap, NetworkParams};
pub use tensor::Tensor;
