//! Adam with a warmup-then-linear-decay learning-rate schedule.
//!
//! The optimizer owns one pair of moment buffers per parameter tensor and
//! updates the latent full-precision weights in place; ternarization sees
//! the updated latents on the next bind. Updates are elementwise f64
//! internally and rounded to f32 on store, once per element.

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use serde::{Deserialize, Serialize};

/// Hyperparameters plus the schedule endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub peak_lr: f32,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub end_lr: f32,
}

impl AdamConfig {
    /// Desk defaults: warmup over the first tenth of the budget, linear
    /// decay from the peak to a thousandth of it.
    pub fn desk_default(total_iters: usize) -> Self {
        let peak_lr = 1e-3;
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            peak_lr,
            warmup_iters: total_iters / 10,
            total_iters,
            end_lr: peak_lr / 1000.0,
        }
    }

    /// Learning rate for one iteration: linear ramp ending exactly at the
    /// peak on the last warmup step, then linear decay reaching `end_lr`
    /// on the final step.
    pub fn lr_at(&self, iter: usize) -> f32 {
        if iter < self.warmup_iters {
            return self.peak_lr * (iter + 1) as f32 / self.warmup_iters as f32;
        }
        let span = (self.total_iters.saturating_sub(self.warmup_iters)).max(1) as f64;
        let done = (iter + 1 - self.warmup_iters) as f64 / span;
        let lr = self.peak_lr as f64 + (self.end_lr as f64 - self.peak_lr as f64) * done.min(1.0);
        lr as f32
    }
}

/// Moment buffers in canonical parameter order.
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, model: &TransformerModel) -> Adam {
        let mut m = Vec::new();
        model.for_each_param(|_, data| m.push(vec![0.0; data.len()]));
        let v = m.clone();
        Adam { config, m, v, steps: 0 }
    }

    /// Apply one update from `grads` (canonical order, as produced by
    /// gradient collection) at the given iteration's learning rate.
    /// Returns the rate used.
    pub fn step(
        &mut self,
        iter: usize,
        model: &mut TransformerModel,
        grads: &[Vec<f32>],
    ) -> Result<f32> {
        if grads.len() != self.m.len() {
            return Err(Error::CheckpointMismatch {
                detail: format!(
                    "optimizer holds {} parameter tensors, step received {}",
                    self.m.len(),
                    grads.len()
                ),
            });
        }
        for (idx, g) in grads.iter().enumerate() {
            if g.len() != self.m[idx].len() {
                return Err(Error::CheckpointMismatch {
                    detail: format!(
                        "gradient {idx} has {} elements, moments have {}",
                        g.len(),
                        self.m[idx].len()
                    ),
                });
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    what: format!("tensor {idx} contains {bad}"),
                });
            }
        }
        self.steps += 1;
        let lr = self.config.lr_at(iter) as f64;
        let b1 = self.config.beta1 as f64;
        let b2 = self.config.beta2 as f64;
        let eps = self.config.eps as f64;
        let bias1 = 1.0 - b1.powi(self.steps as i32);
        let bias2 = 1.0 - b2.powi(self.steps as i32);
        let mut idx = 0usize;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.for_each_param_mut(|_, data| {
            let g = &grads[idx];
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            for i in 0..data.len() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / bias1;
                let vhat = vi / bias2;
                data[i] = (data[i] as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
            idx += 1;
        });
        Ok(lr as f32)
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttnScale, ModelConfig, TaskHead, TransformerModel};

    fn tiny_model(seed: u64) -> TransformerModel {
        let cfg = ModelConfig {
            num_layers: 1,
            d_model: 4,
            heads: 1,
            seq_len: 4,
            vocab: 6,
            d_ff: 8,
            task_head: TaskHead::Classification { num_classes: 2 },
            attn_scale: AttnScale::SqrtD,
        };
        TransformerModel::init(&cfg, seed).unwrap()
    }

    #[test]
    fn schedule_shape() {
        let c = AdamConfig::desk_default(1000);
        assert_eq!(c.warmup_iters, 100);
        // ramp hits the peak exactly on the last warmup step
        assert!(c.lr_at(0) > 0.0);
        assert!((c.lr_at(99) - 1e-3).abs() < 1e-9);
        // decay is monotone and lands on end_lr
        let mut prev = c.lr_at(100);
        for iter in 101..1000 {
            let lr = c.lr_at(iter);
            assert!(lr <= prev + 1e-12, "iter {iter}");
            prev = lr;
        }
        assert!((c.lr_at(999) - 1e-6).abs() < 1e-9);
        // ramp is increasing
        assert!(c.lr_at(0) < c.lr_at(50));
        assert!(c.lr_at(50) < c.lr_at(99));
    }

    #[test]
    fn schedule_degenerate_budgets() {
        let c = AdamConfig { warmup_iters: 0, ..AdamConfig::desk_default(10) };
        assert!((c.lr_at(0) - 1e-3 * 0.9001).abs() < 1e-6);
        let one = AdamConfig::desk_default(1);
        assert_eq!(one.warmup_iters, 0);
        let lr = one.lr_at(0);
        assert!(lr.is_finite() && lr > 0.0);
    }

    #[test]
    fn first_step_moves_by_signed_rate() {
        // bias correction makes the first update lr * g/|g| up to eps
        let mut model = tiny_model(1);
        let cfg = AdamConfig {
            warmup_iters: 0,
            peak_lr: 0.01,
            end_lr: 0.01,
            ..AdamConfig::desk_default(100)
        };
        let mut before = Vec::new();
        model.for_each_param(|_, d| before.push(d.to_vec()));
        let mut grads = Vec::new();
        model.for_each_param(|_, d| {
            grads.push((0..d.len()).map(|i| if i % 2 == 0 { 0.5 } else { -2.0 }).collect())
        });
        let mut adam = Adam::new(cfg, &model);
        let lr = adam.step(0, &mut model, &grads).unwrap();
        let mut idx = 0;
        model.for_each_param(|_, d| {
            for (i, v) in d.iter().enumerate() {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let got = before[idx][i] - v;
                assert!((got - sign * lr).abs() < 1e-5, "update {got} vs {}", sign * lr);
            }
            idx += 1;
        });
    }

    #[test]
    fn quadratic_converges_to_target() {
        // loss = 0.5 * sum (w - t)^2 over every parameter tensor
        let mut model = tiny_model(2);
        let cfg = AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            peak_lr: 0.05,
            warmup_iters: 10,
            total_iters: 400,
            end_lr: 0.005,
        };
        let mut adam = Adam::new(cfg, &model);
        let mut shapes = Vec::new();
        model.for_each_param(|_, d| shapes.push(d.len()));
        let target = 0.3f32;
        for iter in 0..400 {
            let mut grads = Vec::new();
            model.for_each_param(|_, d| grads.push(d.iter().map(|w| w - target).collect()));
            adam.step(iter, &mut model, &grads).unwrap();
        }
        let mut worst = 0.0f32;
        model.for_each_param(|_, d| {
            for w in d {
                worst = worst.max((w - target).abs());
            }
        });
        assert!(worst < 1e-2, "worst distance {worst}");
        assert_eq!(adam.steps_taken(), 400);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut model = tiny_model(3);
            let cfg = AdamConfig::desk_default(50);
            let mut adam = Adam::new(cfg, &model);
            for iter in 0..50 {
                let mut grads = Vec::new();
                model.for_each_param(|_, d| {
                    grads.push(d.iter().map(|w| (w * 3.0).sin()).collect())
                });
                adam.step(iter, &mut model, &grads).unwrap();
            }
            let mut flat = Vec::new();
            model.for_each_param(|_, d| flat.extend(d.iter().map(|v| v.to_bits())));
            flat
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_and_finiteness_guards() {
        let mut model = tiny_model(4);
        let mut adam = Adam::new(AdamConfig::desk_default(10), &model);
        let mut grads = Vec::new();
        model.for_each_param(|_, d| grads.push(vec![0.0f32; d.len()]));
        grads.pop();
        assert!(matches!(
            adam.step(0, &mut model, &grads),
            Err(Error::CheckpointMismatch { .. })
        ));
        let mut grads = Vec::new();
        model.for_each_param(|_, d| grads.push(vec![0.0f32; d.len()]));
        grads[0][0] = f32::NAN;
        assert!(matches!(
            adam.step(0, &mut model, &grads),
            Err(Error::NonFiniteGradient { .. })
        ));
        // a failed step must not advance the counter
        assert_eq!(adam.steps_taken(), 0);
    }
}
