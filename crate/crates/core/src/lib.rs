//! Modality-aware editing of a tiny vision-language transformer.
//!
//! The crate bundles a small reverse-mode differentiator ([`tensor`]), a
//! frozen decoder-only vision-language model with layer hooks ([`vlm`]),
//! per-modality cross-attention adapters behind a last-token similarity
//! gate ([`editor`]), the reliability/generality/locality objective
//! ([`training`]), the five editing metrics ([`evalkit`]), modality
//! analyses ([`analysis`]) and a procedural toy world ([`datasynth`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the 64-bit instantiation used throughout the tools.

pub mod analysis;
pub mod checkpoint;
pub mod datasynth;
pub mod editor;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod vlm;

pub use error::{CheckpointError, Error, Result};
pub use scalar::Scalar;

/// 64-bit tensor.
pub type Tensor = tensor::Tensor<f64>;

/// 64-bit model.
pub type Vlm = vlm::Vlm<f64>;
