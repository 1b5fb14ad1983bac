//! Deterministic image-classification pipeline: diffusion denoising,
//! SMOTE balancing, small CNN/ViT training and evaluation metrics.

pub mod dataset;
pub mod denoise;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod smote;
pub mod synth;

pub use error::{Error, Result};
