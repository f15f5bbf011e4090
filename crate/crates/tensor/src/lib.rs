//! Double-precision tensors with a dynamic reverse-mode differentiation graph.
//!
//! Every operation on a [`Tensor`] that involves at least one input with
//! `requires_grad` records itself in the graph. Calling [`Tensor::backward`]
//! on a scalar output walks the recorded graph in reverse creation order and
//! accumulates gradients into every reachable leaf that requires them.
//! Gradients accumulate across calls until [`Tensor::zero_grad`] is called.
//!
//! ```
//! use dnloc_tensor::Tensor;
//!
//! let x = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]);
//! let y = x.square().sum();
//! y.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
//! ```

mod backward;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod init;
mod ops;
mod shape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheck};
pub use ops::CustomOp;
pub use tensor::Tensor;
