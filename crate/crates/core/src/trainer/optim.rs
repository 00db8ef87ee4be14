//! Adam with an inverse-square-root warmup schedule.

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub factor: f64,
    pub d_model: usize,
    pub warmup: u64,
}

impl Schedule {
    /// `factor · d^-0.5 · min(step^-0.5, step · warmup^-1.5)` for `step >= 1`.
    pub fn rate(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.factor * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }

    pub fn peak(&self) -> f64 {
        self.rate(self.warmup.max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub schedule: Schedule,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPSILON: f64 = 1e-9;

impl OptimizerState {
    pub fn new(params: &ParamStore, schedule: Schedule) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            schedule,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One bias-corrected Adam update. Returns the learning rate used.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> f64 {
        assert_eq!(grads.len(), self.first.len(), "one gradient per parameter");
        self.step += 1;
        let lr = self.schedule.rate(self.step);
        let c1 = 1.0 - BETA1.powf(self.step as f64);
        let c2 = 1.0 - BETA2.powf(self.step as f64);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let w = params.data_mut(ParamId::from_index(i));
            assert_eq!(g.len(), w.len(), "moment shape");
            for j in 0..g.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPSILON);
            }
        }
        lr
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
