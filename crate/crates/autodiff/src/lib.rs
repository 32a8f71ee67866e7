//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values are `f32`; complex data travels as paired real planes ([`ComplexTensor`],
//! [`CVar`]). The [`Graph`] records operations as they run and differentiates
//! them in one reverse sweep.

pub mod complex;
pub mod conv;
pub mod error;
pub mod fft;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use complex::ComplexTensor;
pub use error::{Result, TensorError};
pub use graph::{CVar, Gradients, Graph, Var};
pub use optim::{adam_step, Adam, AdamState};
pub use tensor::Tensor;
