//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod kernels;
mod tape;
mod tensor;

pub use tape::{finite_diff_gradient, Elementwise, Gradients, NodeId, PoolKind, ReversalScale, Tape};
pub use tensor::{Init, Tensor};
