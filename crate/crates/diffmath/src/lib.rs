//! Dense tensors with a tape-based reverse-mode engine.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//!
//! ```
//! use imoc_diffmath::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let y = g.sq_norm(x).unwrap();
//! let y = g.sum_all(y);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.grad(x).data(), &[2.0, -4.0, 1.0]);
//! ```
//!
//! Kernels split work per sample (or per fixed-size chunk) and reduce in a
//! fixed order, so results do not depend on the number of worker threads.

mod backward;
mod conv;
mod error;
mod gradcheck;
mod graph;
mod optim;
pub mod par;
mod scalar;
mod tensor;

pub use backward::Gradients;
pub use conv::{conv_output_size, Conv2dSpec};
pub use error::{DiffError, Result};
pub use gradcheck::{finite_difference_check, GradCheckReport, FD_EPSILON};
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use scalar::{DType, Real};
pub use tensor::Tensor;
