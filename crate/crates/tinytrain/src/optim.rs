//! AdamW with decoupled weight decay and a linear warmup schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    /// Whether each parameter receives weight decay.
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, decay: Vec<bool>) -> Self {
        let n = decay.len();
        AdamW { config, m: vec![0.0; n], v: vec![0.0; n], decay, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.t as i32);
        let step = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            if self.decay[i] {
                params[i] -= lr * c.weight_decay * params[i];
            }
            params[i] -= step * self.m[i] / (self.v[i].sqrt() / bc2_sqrt + c.eps);
        }
    }
}

/// Learning rate at 0-based `step`: linear ramp over `warmup` steps, then constant.
pub fn warmup_lr(base: f32, warmup: u64, step: u64) -> f32 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f32 / warmup as f32
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f32) -> f32 {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g), ignoring eps.
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, vec![false; 2]);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut opt = AdamW::new(AdamWConfig::default(), vec![true, false]);
        let mut p = vec![2.0, 2.0];
        opt.step(&mut p, &[0.0, 0.0], 0.5);
        assert_eq!(p, [2.0 - 0.5 * 0.1 * 2.0, 2.0]);
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        assert_eq!(warmup_lr(1.0, 4, 0), 0.25);
        assert_eq!(warmup_lr(1.0, 4, 3), 1.0);
        assert_eq!(warmup_lr(1.0, 4, 100), 1.0);
        assert_eq!(warmup_lr(1.0, 0, 0), 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-6);
    }
}
