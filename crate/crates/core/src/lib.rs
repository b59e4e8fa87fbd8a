//! Embedding-space exploration for toy transformer dual encoders.
//!
//! The crate bundles a small vision/text dual encoder with exact reverse-mode
//! gradients, an embedding-matching optimizer, local linear analysis of the
//! image-to-embedding map, and a noise-based detector for embedding-aligned
//! images.

pub mod autodiff;
pub mod classifier;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod linear_lens;
pub mod matcher;
pub mod noise_detect;
pub mod numerics;

pub use error::{Error, Result};
