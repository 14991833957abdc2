//! Dense n-dimensional tensors with a recording tape for reverse-mode
//! automatic differentiation.
//!
//! The library is deliberately small. Tensors are row-major, there is no
//! broadcasting except scalar-with-tensor, and every differentiable op lives
//! on [`Graph`]. Eager helpers on [`Tensor`] share the same kernels so the
//! frozen (non-differentiable) parts of a model can skip the tape.

mod error;
mod float;
pub mod flops;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod optim;
mod params;
pub mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use float::Float;
pub use flops::{FlopCounter, Scope};
pub use graph::{Gradients, Graph, Var};
pub use optim::{optimizer_steps, Adam, AdamConfig};
pub use params::{Binder, ParamId, ParamSet};
pub use rng::RngStream;
pub use tensor::Tensor;
