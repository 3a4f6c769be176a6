//! Candle-backed networks: the cascaded inpainting denoiser, its sampler and
//! trainer, and the contrastive image-text embedder.

pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod embedder;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod registry;
pub mod sampler;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use error::{ModelError, Result};
