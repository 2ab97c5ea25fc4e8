//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Models build a fresh [`Graph`] per forward pass, bind their [`Params`] onto
//! it, and call [`Graph::backward`] on a scalar loss. All ops run in `f64` so
//! that central finite differences can verify analytic gradients tightly.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{sigmoid, softmax_rows, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, Params};
pub use tensor::Tensor;
