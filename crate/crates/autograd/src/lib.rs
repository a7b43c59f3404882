//! Reverse-mode automatic differentiation on a per-computation tape.
//!
//! Values are dense row-major `f64` matrices ([`Tensor`]). A [`Graph`] records
//! every operation; [`Graph::backward`] returns gradients for trainable
//! parameters and for explicitly requested input variables.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tensor::Tensor;
