//! Safety-driven self-compression of small neural networks.
//!
//! Weights are quantized by a differentiable operator with learnable per-group
//! bit depth and exponent, trained under a composite loss that trades task
//! accuracy against model size. A preservation set guards critical
//! capabilities: when performance on it drops, bit depths are restored to
//! their last known-good values. Components whose quantized weights reach zero
//! are structurally pruned.

pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod data;
pub mod error;
pub mod models;
pub mod nn;
pub mod preserve;
pub mod quant;
pub mod report;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
