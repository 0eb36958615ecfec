//! AdamW with decoupled weight decay and a warmup + cosine learning-rate
//! schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then cosine decay
/// reaching `min_lr` at the final step `total_steps - 1`.
pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    let last = s.total_steps.saturating_sub(1);
    if last <= s.warmup_steps {
        return s.peak_lr;
    }
    let t = (step.min(last) - s.warmup_steps) as f64 / (last - s.warmup_steps) as f64;
    s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `params` and `grads` are matching named tensor lists;
    /// `decays` decides which tensors get weight decay.
    pub fn step<F: Real>(
        &mut self,
        params: Vec<(String, &mut Mat<F>)>,
        grads: Vec<(String, &Mat<F>)>,
        lr: f64,
        decays: impl Fn(&str) -> bool,
    ) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lists differ");
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for (k, ((name, p), (gname, g))) in params.into_iter().zip(grads).enumerate() {
            debug_assert_eq!(name, gname);
            let wd = if decays(&name) { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i].as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let x = p.data[i].as_f64();
                p.data[i] = F::of(x - lr * (mhat / (vhat.sqrt() + self.eps) + wd * x));
            }
        }
    }
}
