//! Minimal dense tensors with reverse-mode differentiation, sized for
//! small convolutional generators on a CPU.

mod adam;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Grads, Graph, Var};
pub use params::{Bound, ParamStore};
pub use tensor::Tensor;
