//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use graph::{AttentionLayout, Binary, Graph, Reduce, Unary, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
