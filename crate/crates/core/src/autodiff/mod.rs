//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheck, DEFAULT_STEP};
pub use graph::{Elementwise, Graph, Reduction, Var};
pub use kernels::tamper_conv_backward;
pub use tensor::{Fill, Tensor};

pub(crate) use tensor::{dims3, dims4};
