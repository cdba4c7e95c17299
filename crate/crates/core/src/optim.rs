//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
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

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_config(len, AdamConfig::default())
    }

    pub fn with_config(len: usize, cfg: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            cfg,
        }
    }
}

/// One Adam update of `params` in place.
pub fn optimizer_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, lr: f32) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("optimizer_step", &[params.len()], &[grads.len()]));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("optimizer_step gradient"));
    }
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    state.t += 1;
    let bc1 = 1.0 - (beta1 as f64).powi(state.t as i32);
    let bc2 = 1.0 - (beta2 as f64).powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] as f64 / bc1;
        let v_hat = state.v[i] as f64 / bc2;
        params[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.5, -2.0];
        let mut s = AdamState::new(2);
        for _ in 0..10 {
            optimizer_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        }
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        for _ in 0..100 {
            optimizer_step(&mut p, &[2.0, -0.5], &mut s, 0.01).unwrap();
        }
        assert!(p[0] < -0.5 && p[1] > 0.5);
    }

    #[test]
    fn first_step_on_quadratic_matches_closed_form() {
        // f(x) = (x - 3)^2 at x = 1: g = -4. After one step m_hat = g,
        // v_hat = g^2, so the update is lr * g / (|g| + eps).
        let (x0, lr) = (1.0f32, 0.05f32);
        let g = 2.0 * (x0 - 3.0);
        let mut p = vec![x0];
        let mut s = AdamState::new(1);
        optimizer_step(&mut p, &[g], &mut s, lr).unwrap();
        let expected = x0 as f64 - lr as f64 * g as f64 / ((g as f64).abs() + 1e-8);
        assert!((p[0] as f64 - expected).abs() < 1e-7);

        // Second step from the new point, by hand.
        let g2 = 2.0 * (p[0] - 3.0);
        let m = 0.9 * 0.1 * g as f64 + 0.1 * g2 as f64;
        let v = 0.999 * 0.001 * (g as f64).powi(2) + 0.001 * (g2 as f64).powi(2);
        let step = lr as f64 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let expected2 = p[0] as f64 - step;
        optimizer_step(&mut p, &[g2], &mut s, lr).unwrap();
        assert!((p[0] as f64 - expected2).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        assert!(optimizer_step(&mut p, &[f32::NAN], &mut s, 0.1).is_err());
    }
}
