//! Dense tensors and a tape-based reverse-mode autodiff graph.
//!
//! All reductions run in a fixed sequential order so repeated runs are
//! bit-identical. Every operation is generic over [`Real`], which lets the
//! training path run in `f32` while gradient checks run in `f64`.

mod graph;
pub mod kernels;
mod params;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
