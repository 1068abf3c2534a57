//! Dense tensors and a static-graph differentiation engine.
//!
//! Reverse mode drives parameter updates; forward mode supplies the time
//! derivatives inside the MeanFlow and consistency targets.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, relative_error, GradMode, FORWARD_STEP, REVERSE_STEP};
pub use graph::{Graph, GraphBuilder, Node, NodeId, Op, Trace};
pub use tensor::{DualTensor, Tensor};
