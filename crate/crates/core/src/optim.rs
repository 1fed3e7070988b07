//! AdamW with decoupled weight decay and a warmup + polynomial-decay
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{contract, Result};
use crate::model::NetworkParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub contrast_start_iter: usize,
    pub lr_base: f64,
    pub lr_head_multiplier: f64,
    pub poly_power: f64,
}

/// Contrast start as 3/40 of the run, rounded down.
pub fn default_contrast_start(total_iters: usize) -> usize {
    total_iters * 3 / 40
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        contract!(
            self.warmup_iters <= self.total_iters,
            "warmup {} exceeds total iterations {}",
            self.warmup_iters,
            self.total_iters
        );
        contract!(
            self.contrast_start_iter <= self.total_iters,
            "contrast start {} exceeds total iterations {}",
            self.contrast_start_iter,
            self.total_iters
        );
        contract!(
            self.lr_base > 0.0 && self.lr_head_multiplier > 0.0 && self.poly_power >= 0.0,
            "learning rates must be positive and the decay power non-negative"
        );
        Ok(())
    }

    /// Multiplier on the base rate at `step` (0-based): linear warmup to 1
    /// over `warmup_iters`, times `(1 − step/total)^power`.
    pub fn factor(&self, step: usize) -> f64 {
        let warm = if self.warmup_iters > 0 && step < self.warmup_iters {
            (step + 1) as f64 / self.warmup_iters as f64
        } else {
            1.0
        };
        let progress = if self.total_iters == 0 {
            0.0
        } else {
            (step as f64 / self.total_iters as f64).min(1.0)
        };
        warm * (1.0 - progress).powf(self.poly_power)
    }

    pub fn lr(&self, step: usize, head: bool) -> f64 {
        let base = if head {
            self.lr_base * self.lr_head_multiplier
        } else {
            self.lr_base
        };
        base * self.factor(step)
    }

    pub fn contrast_active(&self, step: usize) -> bool {
        step >= self.contrast_start_iter
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: first/second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &NetworkParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update with a per-tensor learning rate:
    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + λθ)`.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        let n = params.tensors().len();
        contract!(
            grads.len() == n && lrs.len() == n && self.m.len() == n,
            "optimizer got {} gradients and {} rates for {} tensors",
            grads.len(),
            lrs.len(),
            n
        );
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[k].data();
            contract!(g.len() == p.len(), "gradient {k} has the wrong length");
            let (m, v, lr) = (&mut self.m[k], &mut self.v[k], lrs[k]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;

    fn sched() -> TrainSchedule {
        TrainSchedule {
            total_iters: 100,
            warmup_iters: 10,
            contrast_start_iter: default_contrast_start(100),
            lr_base: 1e-3,
            lr_head_multiplier: 10.0,
            poly_power: 1.0,
        }
    }

    #[test]
    fn schedule_shape() {
        let s = sched();
        assert!((s.factor(0) - 0.1).abs() < 1e-15);
        assert!((s.factor(9) - 0.91).abs() < 1e-12);
        assert!((s.factor(50) - 0.5).abs() < 1e-15);
        assert!((s.lr(50, true) - 5e-3).abs() < 1e-15);
        assert_eq!(default_contrast_start(40_000), 3_000);
        assert_eq!(default_contrast_start(2000), 150);
        assert_eq!(default_contrast_start(10), 0);
        assert!(!s.contrast_active(6) && s.contrast_active(7));
        let bad = TrainSchedule { warmup_iters: 101, ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adamw_first_step_and_decay() {
        let shape = ModelShape {
            hidden: 1,
            proj_hidden: 1,
            embed_dim: 1,
            classes: 1,
        };
        let mut p = NetworkParams::zeros(shape).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(1.0);
        }
        let grads: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::full(t.shape(), 0.5)).collect();
        let lrs = vec![0.1; grads.len()];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &grads, &lrs).unwrap();
        // First bias-corrected step is lr·sign(g) plus decoupled decay.
        let want = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01);
        assert!(p
            .tensors()
            .iter()
            .all(|t| t.data().iter().all(|w| (w - want).abs() < 1e-12)));

        let zero: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut q = NetworkParams::zeros(shape).unwrap();
        for t in q.tensors_mut() {
            t.data_mut().fill(2.0);
        }
        let mut opt = AdamW::new(AdamWConfig::default(), &q);
        opt.step(&mut q, &zero, &lrs).unwrap();
        assert!((q.tensors()[0].data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }
}
