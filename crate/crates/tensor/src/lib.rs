//! Dense row-major tensors and a recording tape for reverse-mode
//! differentiation.
//!
//! Every forward primitive appends a node to a [`Graph`]. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns the gradients of every leaf that was created with
//! `requires_grad`. The same code runs in `f32` and `f64` through the
//! [`Real`] trait, which is how the finite-difference checks in
//! [`gradcheck`] reach tight tolerances.

mod error;
mod graph;
mod kernels;
mod real;
mod tensor;

pub mod gradcheck;

pub use error::{Result, TensorError};
pub use graph::{Conv2dSpec, Gradients, Graph, Padding, Var};
#[doc(hidden)]
pub use real::MatRef;
pub use real::Real;
pub use tensor::Tensor;
