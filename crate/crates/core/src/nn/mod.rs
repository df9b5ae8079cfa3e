//! Minimal CPU tensor engine: NCHW tensors, reverse-mode autodiff, Adam.

pub(crate) mod conv;
pub mod graph;
pub mod layers;
pub mod likelihood;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{Builder, FaSlot, Fwd};
pub use params::{Adam, Init, ParamId, ParamStore};
pub use tensor::Tensor;
