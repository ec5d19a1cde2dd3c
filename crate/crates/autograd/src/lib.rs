//! A small reverse-mode automatic differentiation engine over dense
//! row-major tensors.
//!
//! Every backward rule is expressed with the same differentiable tensor
//! operations as the forward pass, so gradients can themselves be
//! differentiated (`grad(.., create_graph = true)`).

mod backward;
mod conv;
mod ops;
mod scalar;
mod strided;
mod tensor;

pub use backward::{grad, grad_with_seed};
pub use conv::ConvGeometry;
pub use scalar::Scalar;
pub use tensor::{is_grad_enabled, no_grad, Tensor};

