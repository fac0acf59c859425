use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{contract, Result};
use crate::scalar::Scalar;

/// Linear warmup from 0 to `peak`, then linear decay to `peak · final_fraction`
/// at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub final_fraction: f64,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak;
        }
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.peak * (1.0 - t * (1.0 - self.final_fraction))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &EncoderModel<T>, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, model: &mut EncoderModel<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return contract(format!("{} gradients for {} parameters", grads.len(), self.m.len()));
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::of(lr), T::of(self.cfg.eps));
        for (pi, p) in model.params_mut().iter_mut().enumerate() {
            let g = &grads[pi];
            let w = p.tensor_mut().data_mut();
            if g.len() != w.len() {
                return contract(format!("gradient {} has the wrong length", pi));
            }
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| {
            let g = g.to_f64_lossy();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak: 1e-3,
            warmup_steps: 10,
            total_steps: 110,
            final_fraction: 0.01,
        };
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(5), 5e-4);
        assert_eq!(s.at(10), 1e-3);
        assert!((s.at(60) - 1e-3 * 0.505).abs() < 1e-15);
        assert!((s.at(110) - 1e-5).abs() < 1e-18);
        assert!((s.at(500) - 1e-5).abs() < 1e-18);
        let flat = LrSchedule { warmup_steps: 0, total_steps: 0, ..s };
        assert_eq!(flat.at(3), 1e-3);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1f64]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
