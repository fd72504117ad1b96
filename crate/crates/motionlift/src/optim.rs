//! Adaptive-moment optimizer with decoupled weight decay and cosine
//! learning-rate decay.
//!
//! The update keeps first/second moment estimates per trainable tensor and
//! applies weight decay directly to the parameter (not through the gradient),
//! so the decay strength is independent of the gradient scaling. Decay is
//! applied only to tensors of rank ≥ 2 — biases, norm gains, and other
//! vector/scalar parameters are exempt, which is the usual practice.
//!
//! Parameters whose gradient is absent from a step (for example a task head
//! that the loss never touched) are skipped entirely: no moment update and no
//! decay, mirroring the "no grad, no update" convention.

use ndarray::IxDyn;

use crate::graph::{Gradients, Tensor, Var};
use crate::params::ParamSet;

/// Optimizer hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimConfig {
    /// Peak learning rate at step 0.
    pub lr: f64,
    /// Decoupled weight-decay coefficient for rank ≥ 2 tensors.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Horizon of the cosine decay; the rate reaches 0 here and stays there.
    pub total_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: 1,
        }
    }
}

/// Optimizer state: one pair of moment tensors per trainable parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    step: usize,
    trainable: Vec<usize>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: OptimConfig) -> Self {
        let trainable = params.trainable_indices();
        let m = trainable
            .iter()
            .map(|&i| Tensor::zeros(IxDyn(params.value(i).shape())))
            .collect();
        let v = trainable
            .iter()
            .map(|&i| Tensor::zeros(IxDyn(params.value(i).shape())))
            .collect();
        Self {
            cfg,
            step: 0,
            trainable,
            m,
            v,
        }
    }

    /// Steps completed so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Cosine-decayed learning rate for a given step index (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.cfg.total_steps.max(1);
        let frac = (step as f64 / total as f64).min(1.0);
        0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Applies one update. `vars` is the tape binding aligned with the
    /// parameter order (as produced by `Model::bind`). Returns the learning
    /// rate that was used.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, vars: &[Var]) -> f64 {
        let lr = self.lr_at(self.step);
        self.step += 1;
        let (b1, b2, eps, wd) = (
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.eps,
            self.cfg.weight_decay,
        );
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);

        for (slot, &idx) in self.trainable.iter().enumerate() {
            let Some(g) = grads.get(vars[idx]) else {
                continue;
            };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (1.0 - b2) * g * g;
            });

            let decay = if params.value(idx).ndim() >= 2 { wd } else { 0.0 };
            let mut value = params.value(idx).clone();
            ndarray::Zip::from(&mut value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * *p);
                });
            params.set_value(idx, value);
        }
        lr
    }
}
