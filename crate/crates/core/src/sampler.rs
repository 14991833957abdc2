//! Deterministic DDIM sampling with classifier-free guidance.

use mbtensor::{rng::normal, RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::denoiser::schedule::mix;
use crate::denoiser::NoiseSchedule;
use crate::encoders::autoencoder::clamp_unit;
use crate::encoders::{Image, LatentCodec};
use crate::{Error, Result};

pub const DEFAULT_SAMPLE_STEPS: usize = 100;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

/// Both variants are deterministic (`η = 0`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerVariant {
    Ddim,
    /// Projects every `x̂₀` estimate onto decodable images (decode, clamp to
    /// `[0, 1]`, encode) and re-derives `ε̂` from it.
    #[default]
    DdimClipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub variant: SamplerVariant,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_SAMPLE_STEPS,
            guidance: DEFAULT_GUIDANCE,
            seed: 0,
            variant: SamplerVariant::default(),
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::Config(format!("guidance must be ≥ 0, got {}", self.guidance)));
        }
        Ok(())
    }
}

/// Uniformly spaced timesteps, largest first, ending at `T/steps − 1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!("cannot take {steps} steps over {total} timesteps")));
    }
    Ok((0..steps).rev().map(|i| (i + 1) * total / steps - 1).collect())
}

/// `ε_u + ω(ε_c − ε_u)`.
pub fn guided_noise(eps_cond: &Tensor<f32>, eps_uncond: &Tensor<f32>, guidance: f64) -> Result<Tensor<f32>> {
    if guidance == 1.0 {
        return Ok(eps_cond.clone());
    }
    if guidance == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(mbtensor::TensorError::Shape {
            op: "guided_noise",
            lhs: eps_cond.shape().to_vec(),
            rhs: eps_uncond.shape().to_vec(),
        }
        .into());
    }
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| (u as f64 + guidance * (c as f64 - u as f64)) as f32)
        .collect();
    Ok(Tensor::new(eps_cond.shape().to_vec(), data)?)
}

/// Seeded starting latent `z_T ~ N(0, I)`.
pub fn initial_latent(seed: u64, shape: &[usize]) -> Tensor<f32> {
    normal(&mut RngStream::new(seed).split("sample").split("z_T").rng(), shape.to_vec(), 1.0)
}

/// One `η = 0` update from `t` to `prev` (`None` is the clean end point).
pub fn ddim_step(schedule: &NoiseSchedule, z_t: &Tensor<f32>, eps: &Tensor<f32>, t: usize, prev: Option<usize>) -> Result<Tensor<f32>> {
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let x0 = mix(z_t, eps, 1.0 / a, -s / a)?;
    match prev {
        None => Ok(x0),
        Some(p) => mix(&x0, eps, schedule.alpha(p), schedule.sigma(p)),
    }
}

/// Noise consistent with `z_t` and the clipped projection of its `x̂₀`.
pub fn clip_noise(codec: &LatentCodec, schedule: &NoiseSchedule, z_t: &Tensor<f32>, eps: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let x0 = mix(z_t, eps, 1.0 / a, -s / a)?;
    let x0 = codec.encode(&clamp_unit(&codec.decode(&x0)?))?;
    mix(z_t, &x0, 1.0 / s, -a / s)
}

/// Runs the guided chain from a seeded `z_T` and returns the final latent.
/// `cond` and `uncond` predict noise for `(z_t, t)`.
pub fn sample_latent(
    cfg: &SampleConfig,
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    shape: &[usize],
    mut cond: impl FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
    mut uncond: impl FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let ts = ddim_timesteps(schedule.len(), cfg.steps)?;
    let mut z = initial_latent(cfg.seed, shape);
    for (i, &t) in ts.iter().enumerate() {
        let ec = cond(&z, t)?;
        let mut eps = if cfg.guidance == 1.0 {
            ec
        } else {
            guided_noise(&ec, &uncond(&z, t)?, cfg.guidance)?
        };
        if cfg.variant == SamplerVariant::DdimClipped {
            eps = clip_noise(codec, schedule, &z, &eps, t)?;
        }
        z = ddim_step(schedule, &z, &eps, t, ts.get(i + 1).copied())?;
        if !z.all_finite() {
            return Err(Error::Diverged { step: i, loss: f64::NAN });
        }
    }
    Ok(z)
}

/// Decodes and clamps a latent to an 8-bit-ready image.
pub fn decode_image(codec: &LatentCodec, z: &Tensor<f32>) -> Result<Image> {
    Ok(clamp_unit(&codec.decode(z)?))
}
