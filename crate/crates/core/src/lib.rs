//! Concept-level language-model training on synthetic concept-structured corpora.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for common uses.

pub mod conceptset;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type ParamsF32 = model::ModelParams<f32>;
pub type ParamsF64 = model::ModelParams<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
