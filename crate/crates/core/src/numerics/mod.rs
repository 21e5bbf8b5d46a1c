//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

mod attention;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{default_eps, finite_difference_at, finite_difference_gradients, max_relative_error, relative_error};
pub use graph::{Conv2dOptions, CustomOp, Gradients, Graph, Var};
pub use tensor::{Precision, Tensor};
