//! Quantization-aware training and 8-bit inference for a compact promptable
//! segmentation model (ViT-style image encoder, box prompt encoder, two-way
//! attention mask decoder).

pub mod boxes;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod rng;
pub mod store;
pub mod tensor;
pub mod training;

pub use error::{Error, Module, Result};
pub use exec::Exec;
