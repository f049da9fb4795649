//! Adam with decoupled weight decay, and the warmup-cosine learning rate
//! schedule used by both language-model phases.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};

use crate::nn::Parameters;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(Array2<f64>, Array2<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr` using the accumulated gradients.
    pub fn step(&mut self, model: &mut dyn Parameters, lr: f64) {
        if self.moments.is_empty() {
            model.visit(&mut |_, p| {
                self.moments
                    .push((Array2::zeros(p.value.raw_dim()), Array2::zeros(p.value.raw_dim())))
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut idx = 0;
        let moments = &mut self.moments;
        model.visit_mut(&mut |_, p| {
            let (m, v) = &mut moments[idx];
            idx += 1;
            let decay = if p.decay { lr * wd } else { 0.0 };
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= decay * *w;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        });
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero.
///
/// Steps are counted from 1: the rate reaches `base_lr` exactly at step
/// `warmup_steps` and zero at step `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn new(base_lr: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = (warmup_ratio * total_steps as f64 - 1e-9).ceil().max(0.0) as usize;
        Self {
            base_lr,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.base_lr;
            }
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}
