//! Latent-attention transformers over user event sequences, a two-stage
//! ranking pipeline with a cached user-embedding bottleneck, and a harness
//! for measuring Normalized-Entropy scaling curves on synthetic data.

pub mod backbone;
pub mod error;
pub mod events;
pub mod model;
pub mod multistage;
pub mod numerics;
pub mod rng;
pub mod scaling;
pub mod sequence;
pub mod trainer;

pub use error::{Error, Result};
