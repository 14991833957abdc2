//! Variance-preserving linear-β noise schedule.

use mbtensor::Tensor;

use crate::{Error, Result};

pub const TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// `β` spaced linearly from [`BETA_START`] to [`BETA_END`] over `t`
    /// steps; `ᾱ_t = Π(1 − β)`, `α_t = √ᾱ_t`, `σ_t = √(1 − ᾱ_t)`.
    pub fn linear(t: usize) -> Result<Self> {
        if t < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 timesteps, got {t}")));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (t - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let alphas = alpha_bars.iter().map(|a| a.sqrt()).collect();
        let sigmas = alpha_bars.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            betas,
            alpha_bars,
            alphas,
            sigmas,
        })
    }

    pub fn standard() -> Self {
        Self::linear(TIMESTEPS).expect("valid length")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Config(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }

    /// `z_t = α_t z + σ_t ε`.
    pub fn add_noise(&self, z: &Tensor<f32>, eps: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        self.check_t(t)?;
        let (a, s) = (self.alpha(t), self.sigma(t));
        mix(z, eps, a, s)
    }
}

/// `a·x + s·y`, accumulated in `f64`.
pub fn mix(x: &Tensor<f32>, y: &Tensor<f32>, a: f64, s: f64) -> Result<Tensor<f32>> {
    if x.shape() != y.shape() {
        return Err(mbtensor::TensorError::Shape {
            op: "mix",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        }
        .into());
    }
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &q)| (a * p as f64 + s * q as f64) as f32)
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}
