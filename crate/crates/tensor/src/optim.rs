use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Float, ParamSet};

static OPTIMIZER_STEPS: AtomicU64 = AtomicU64::new(0);

/// Process-wide count of optimizer updates applied to any parameter set.
pub fn optimizer_steps() -> u64 {
    OPTIMIZER_STEPS.load(Ordering::SeqCst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter holding a gradient,
    /// then clears the gradients.
    pub fn step<T: Float>(&mut self, params: &mut ParamSet<T>) {
        if self.m.is_empty() {
            for id in params.ids() {
                let n = params.get(id).numel();
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        }
        self.step += 1;
        OPTIMIZER_STEPS.fetch_add(1, Ordering::SeqCst);
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids() {
            let t = params.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let Some(grad) = t.take_grad() else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((w, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.to_f64_lossy();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *w = T::of(w.to_f64_lossy() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::<f64>::new();
        let id = p.add("w", Tensor::from_f64([2], &[1.0, -1.0]).unwrap().with_requires_grad(true));
        let frozen = p.add("b", Tensor::from_f64([1], &[5.0]).unwrap());
        p.get_mut(id).accumulate_grad(&[0.3, -2.0]).unwrap();
        let before = optimizer_steps();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut p);
        assert!(optimizer_steps() > before);
        // First bias-corrected step is lr·sign(g) up to eps.
        let w = p.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(p.get(frozen).data(), &[5.0]);
        assert!(p.get(id).grad().is_none());
    }
}
