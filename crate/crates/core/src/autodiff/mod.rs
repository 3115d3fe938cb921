//! A small reverse-mode automatic differentiation engine.
//!
//! Parameters live in a [`ParamStore`]; every forward pass copies the ones it
//! uses onto a fresh [`Graph`] tape, and [`Graph::backward`] fills in their
//! gradients for [`AdamW`] to consume.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod param;
mod scalar;
mod tensor;

pub use checkpoint::{Checkpoint, Entry};
pub use graph::{Graph, Var};
pub use optim::AdamW;
pub use param::{kaiming_uniform, scaled_normal, ParamId, ParamStore, Parameter};
pub use scalar::{matmul, Scalar};
pub use tensor::Tensor;
