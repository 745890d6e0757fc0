use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { lr: f64 },
    SgdMomentum { lr: f64, momentum: f64 },
}

impl OptimizerConfig {
    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr } | OptimizerConfig::SgdMomentum { lr, .. } => lr,
        }
    }
}

/// First/second moment estimates and step count for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

fn check_len(params: &[f64], grads: &[f64], state: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != state {
        return Err(Error::shape(format!(
            "optimizer shapes differ: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state
        )));
    }
    Ok(())
}

/// Bias-corrected Adam with coupled weight decay (`g + λ·p`).
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    check_len(params, grads, state.m.len())?;
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_len(params, grads, velocity.len())?;
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i] + weight_decay * params[i];
        params[i] -= lr * velocity[i];
    }
    Ok(())
}

/// Per-tensor optimizer state, created lazily on first update.
#[derive(Debug, Clone)]
pub(crate) enum OptimizerState {
    Adam(AdamState),
    Sgd(Vec<f64>),
}

impl OptimizerState {
    pub fn new(cfg: &OptimizerConfig, len: usize) -> Self {
        match cfg {
            OptimizerConfig::Adam { .. } => OptimizerState::Adam(AdamState::new(len)),
            OptimizerConfig::SgdMomentum { .. } => OptimizerState::Sgd(vec![0.0; len]),
        }
    }

    pub fn step(&mut self, cfg: &OptimizerConfig, params: &mut [f64], grads: &[f64], lr: f64, wd: f64) -> Result<()> {
        match (self, cfg) {
            (OptimizerState::Adam(s), OptimizerConfig::Adam { .. }) => adam_step(params, grads, s, lr, wd),
            (OptimizerState::Sgd(v), OptimizerConfig::SgdMomentum { momentum, .. }) => {
                sgd_momentum_step(params, grads, v, lr, *momentum, wd)
            }
            _ => Err(Error::invalid("optimizer state does not match optimizer config")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr() {
        // m̂ = v̂ = 1 after bias correction, so the step is lr / (1 + ε).
        let mut p = [0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 0.1, 0.0).unwrap();
        assert!((p[0] + 0.1 / (1.0 + ADAM_EPS)).abs() < 1e-15);
    }

    #[test]
    fn adam_recurrence_by_hand() {
        let mut p = [0.5];
        let mut s = AdamState::new(1);
        let (lr, wd) = (0.01, 0.1);
        let mut expected = 0.5;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [0.3, -0.2, 0.7].into_iter().enumerate() {
            let ge = g + wd * expected;
            m = 0.9 * m + 0.1 * ge;
            v = 0.999 * v + 0.001 * ge * ge;
            let t = t as i32 + 1;
            expected -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            adam_step(&mut p, &[g], &mut s, lr, wd).unwrap();
        }
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = [1.5, -2.0];
        let mut s = AdamState::new(2);
        for _ in 0..3 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, 0.0).unwrap();
        }
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn adam_identical_streams_identical_trajectories() {
        let grads = [[0.1, -0.3], [0.5, 0.2], [-0.4, 0.0]];
        let run = || {
            let mut p = [0.3, 0.7];
            let mut s = AdamState::new(2);
            for g in &grads {
                adam_step(&mut p, g, &mut s, 0.05, 1e-4).unwrap();
            }
            p
        };
        assert_eq!(run().map(f64::to_bits), run().map(f64::to_bits));
    }

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let mut p = [1.0, 2.0];
        let mut v = [0.0; 2];
        sgd_momentum_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, [1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn velocity_converges_to_geometric_limit() {
        let (g, mu) = (0.3, 0.875);
        let mut p = [0.0];
        let mut v = [0.0];
        for _ in 0..200 {
            sgd_momentum_step(&mut p, &[g], &mut v, 0.0, mu, 0.0).unwrap();
        }
        // v_t = g(1 − μ^t)/(1 − μ); μ^200 ≈ 2.5e-12.
        assert!((v[0] - g / (1.0 - mu)).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_is_coupled() {
        let (p0, g, lambda, lr) = (2.0, 0.5, 0.1, 0.01);
        let mut p = [p0];
        let mut v = [0.0];
        sgd_momentum_step(&mut p, &[g], &mut v, lr, 0.9, lambda).unwrap();
        assert_eq!(v[0], g + lambda * p0);
        assert_eq!(p[0], p0 - lr * (g + lambda * p0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = [0.0; 2];
        let mut s = AdamState::new(3);
        assert!(adam_step(&mut p, &[0.0; 2], &mut s, 0.1, 0.0).is_err());
    }
}
