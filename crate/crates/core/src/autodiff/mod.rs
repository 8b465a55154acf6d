//! Reverse-mode differentiation over `f64` tensors.
//!
//! Every vector-Jacobian product is built from the same differentiable ops
//! as the forward pass, so gradients taken with `create_graph = true` can be
//! differentiated again. That is what lets an attacker optimize an image
//! through a loss defined on parameter gradients.

mod array;
mod backward;
mod kernels;
mod ops;
mod tensor;

pub use array::Array;
pub use backward::grad;
pub use tensor::{is_grad_enabled, no_grad, set_grad_enabled, GradModeGuard, Tensor};
