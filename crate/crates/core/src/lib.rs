//! Multi-concept customization of a miniature latent diffusion model:
//! single-concept learning and region-partitioned composition.

mod error;

pub mod assets;
pub mod concept;
pub mod container;
pub mod denoiser;
pub mod encoders;
pub mod eval;
pub mod nn;
pub mod rcm;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
