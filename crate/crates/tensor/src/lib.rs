//! Minimal tensor and reverse-mode autodiff engine.
//!
//! Sized for desk-scale convolutional networks on CPU: row-major dense
//! tensors, im2col convolutions on top of `matrixmultiply`, a per-pass
//! [`Graph`], named parameter storage with freezing, and Adam. Everything is
//! single threaded and bitwise deterministic for a given input.

mod conv;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use conv::{col2im, im2col, ConvGeometry};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected shape {expected:?}, got {actual:?}")]
    Shape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("empty input")]
    Empty,
    #[error("parameter store is frozen")]
    Frozen,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
}
