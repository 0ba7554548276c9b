//! Minimal `f64` tensor and reverse-mode autodiff engine used by the model.

pub mod gradcheck;
mod graph;
mod layers;
mod params;
pub mod sparse;
mod tensor;

pub use graph::{softplus, ConvSpec, Gradients, Graph, Var};
pub use layers::{Conv, Linear};
pub use params::{Init, ParamId, ParamStore};
pub use sparse::SparseMap;
pub use tensor::Tensor;
