//! Dense tensors, reverse-mode autodiff, Adam, and gradient checking.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GradCheck};
pub use graph::{Gradients, Graph, NodeId, PoolWindow};
pub use tensor::Tensor;
pub mod params;

pub use params::{Bound, ParamId, ParamSet};
