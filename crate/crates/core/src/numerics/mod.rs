//! Tensors, reverse-mode autodiff with higher-order gradients, counter-based
//! random streams, and a finite-difference gradient checker.

pub mod autodiff;
pub mod fdcheck;
pub mod kernels;
pub mod rng;
pub mod tensor;

pub use autodiff::{backward, concat, conv2d, conv_transpose, grad_values, no_grad, NoGradGuard, Var};
pub use fdcheck::{finite_difference_check, finite_difference_check_fourth_order, max_relative_error};
pub use kernels::ConvGeom;
pub use rng::RngStream;
pub use tensor::Tensor;
