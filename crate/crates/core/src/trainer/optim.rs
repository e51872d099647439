use serde::{Deserialize, Serialize};

use crate::error::{contract, IconError, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
pub fn adamw_step(params: &mut [f64], grad: &[f64], state: &mut OptimizerState, lr: f64, wd: f64) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return contract("optimizer shapes disagree");
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(IconError::NumericDomain(format!(
            "non-finite gradient entry {i} ({}) at optimizer step {}",
            grad[i],
            state.step + 1
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + EPSILON) + wd * params[i]);
    }
    Ok(())
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`; `lr0` when `total = 0`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = vec![0.3, -1.2, 5.0];
        let before = p.clone();
        let mut s = OptimizerState::new(3);
        adamw_step(&mut p, &[0.0; 3], &mut s, 0.1, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let mut p = vec![0.3, -1.2];
        let mut s = OptimizerState::new(2);
        adamw_step(&mut p, &[0.0; 2], &mut s, 0.01, 0.5).unwrap();
        assert_eq!(p, vec![0.3 * (1.0 - 0.005), -1.2 * (1.0 - 0.005)]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut rng = RngStream::new(0, 0);
        for _ in 0..5 {
            let mut p: Vec<f64> = (0..4).map(|_| rng.uniform(-0.5, 0.5)).collect();
            let mut s = OptimizerState::new(4);
            for step in 0..500 {
                let g = p.clone();
                adamw_step(&mut p, &g, &mut s, cosine_lr(step, 500, 0.05, 0.0), 0.0).unwrap();
            }
            assert!(p.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![1.0];
        let mut s = OptimizerState::new(1);
        assert!(adamw_step(&mut p, &[f64::NAN], &mut s, 0.1, 0.0).is_err());
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn cosine_schedule_landmarks() {
        assert_eq!(cosine_lr(0, 100, 0.002, 0.0), 0.002);
        assert!(cosine_lr(100, 100, 0.002, 1e-5) - 1e-5 < 1e-18);
        assert!((cosine_lr(50, 100, 0.002, 0.0004) - 0.0012).abs() < 1e-15);
    }
}
