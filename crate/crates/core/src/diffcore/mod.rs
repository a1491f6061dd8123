//! Minimal reverse-mode differentiation over dense `f64` matrices, plus Adam.
//!
//! Everything is 64-bit and single-threaded by design: the problems are desk
//! scale and reproducibility matters more than throughput. A [`Graph`] is an
//! append-only arena of nodes; append order is a valid topological order, so
//! the backward pass is a single reverse sweep with gradient accumulation for
//! nodes used more than once.

mod adam;
mod graph;
mod tensor;

pub use adam::Adam;
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
