//! Pixel-space denoising diffusion autoencoders (DDAE) as self-supervised learners.
//!
//! This crate bundles everything needed to train small pixel-space diffusion
//! models and evaluate their intermediate activations as representations:
//!
//! - [`corruption`]: noise schedules (VP/VE) and the forward corruption algebra.
//! - [`nn`]: a minimal CPU tensor/layer toolkit with exact reverse-mode gradients.
//! - [`backbone`]: a configurable UNet noise predictor with named activation
//!   taps and truncation into feature encoders.
//! - [`trainer`]: the diffusion pre-training loop with checkpointing.
//! - [`sampler`]: ancestral sampling with optional classifier guidance.
//! - [`probe`]: feature extraction, linear probing, layer-noise grid search,
//!   and encoder fine-tuning.
//! - [`repmetrics`]: alignment/uniformity diagnostics, Fréchet distance over
//!   pluggable embedders, and the noise-conditional classifier.
//! - [`harness`]: run configuration, dataset ingestion, experiment records,
//!   ablations, and CSV/SVG emission.

pub mod backbone;
pub mod container;
pub mod corruption;
pub mod error;
pub mod harness;
pub mod nn;
pub mod probe;
pub mod repmetrics;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
