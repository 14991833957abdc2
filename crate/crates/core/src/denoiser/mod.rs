//! Noise schedule, LoRA and the latent noise predictor.

pub mod checkpoint;
pub mod lora;
pub mod net;
pub mod schedule;

pub use lora::{lora_project, LayerLora, LoraParams, LoraVars, DEFAULT_RANK};
pub use net::{CrossAttnRouter, CrossAttnSite, CrossAttnWeights, Denoiser, DenoiserConfig, PlainRouter};
pub use schedule::NoiseSchedule;
