//! Adversarial training with a learned, coordinate-wise RNN inner maximizer.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod learned;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
