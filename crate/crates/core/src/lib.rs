//! Multimodal named entity recognition.
//!
//! Text encoders, four image-text fusion modules and a linear-chain CRF,
//! all trained with a small reverse-mode autodiff engine in `f64`.

pub mod crf;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
