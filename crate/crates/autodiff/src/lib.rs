//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Build a forward pass on a [`Graph`], then call [`Graph::backward`] on a
//! `1×1` loss to get gradients for every [`Graph::leaf`].
//!
//! ```
//! use hnf_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::row_vector(vec![1.0, -2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 6.0]);
//! ```

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{topk_mask, Tensor};
