//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] simply sweeps it in reverse.
//!
//! ```
//! use stambridge::autodiff::Graph;
//! use stambridge::Tensor;
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```
//!
//! [`Tensor`]: crate::Tensor

mod backward;
mod graph;
mod ops;

pub use graph::{op_name, Gradients, Graph, Var, OP_NAMES};
pub use ops::{gelu_scalar, LAYER_NORM_EPS, NORM_EPS};
