//! Speculative decoding with a cross-attention draft model for toy
//! vision-language transformers, built on a small f64 autodiff core.

pub mod engine;
pub mod entropy;
pub mod harness;
pub mod model;
pub mod sequence;
pub mod task;
pub mod tensor;
pub mod training;
pub mod vtc;
