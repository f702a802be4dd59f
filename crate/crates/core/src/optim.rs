//! Adam with bias correction.
//!
//! Weight decay is applied as `g + weight_decay * theta` before the moment
//! updates. This is the single interpretation used throughout the crate.

use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment buffers for one parameter slice.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// One Adam update of `params` in place. Empty state buffers are
/// initialized to zeros.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "adam_step: gradient length mismatch");
    if state.m.is_empty() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    assert_eq!(state.m.len(), params.len(), "adam_step: state shape mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] + cfg.weight_decay * params[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam over every tensor of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            states: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// `grads[i]` is the flattened gradient of parameter `i`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), params.len());
        if self.states.is_empty() {
            self.states = vec![AdamState::default(); params.len()];
        }
        for (i, grad) in grads.iter().enumerate() {
            params.update(i, |values| adam_step(values, grad, &mut self.states[i], &self.cfg));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        for g in [0.5, 3.0, 1e-3] {
            let mut p = [1.0];
            let mut st = AdamState::default();
            adam_step(&mut p, &[g], &mut st, &cfg);
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - 1.0 - expected).abs() < 1e-12);
            assert!((p[0] - 1.0 + cfg.lr).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = [1.5, -2.0];
        let mut st = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg);
        }
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn quadratic_decreases_every_step() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut x = [3.0];
        let mut st = AdamState::default();
        let mut f = x[0] * x[0];
        for _ in 0..10 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut st, &cfg);
            let next = x[0] * x[0];
            assert!(next < f);
            f = next;
        }
    }

    #[test]
    fn deterministic() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut p = [0.3, -0.7, 1.1];
            let mut st = AdamState::default();
            for k in 0..7 {
                let g = [0.1 * k as f64, -0.2, p[2]];
                adam_step(&mut p, &g, &mut st, &cfg);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
