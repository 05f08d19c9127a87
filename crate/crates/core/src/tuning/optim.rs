use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update at step `t >= 1`: decoupled decay
/// `p ← p·(1 − lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_step(
    param: &Tensor,
    grad: &Tensor,
    state: &AdamState,
    t: u64,
    lr: f64,
    config: &AdamWConfig,
) -> Result<(Tensor, AdamState)> {
    let n = param.len();
    if grad.shape() != param.shape() || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape(
            "adamw_step",
            format!("param {:?}, grad {:?}, state {}", param.shape(), grad.shape(), state.m.len()),
        ));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("adamw step count starts at 1".into()));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("adamw_step gradient"));
    }
    let AdamWConfig {
        beta1,
        beta2,
        epsilon,
        weight_decay,
    } = *config;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let decay = 1.0 - lr * weight_decay;
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let mut p = param.to_vec();
    for i in 0..n {
        let g = grad.data()[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok((Tensor::new(param.shape().to_vec(), p)?, AdamState { m, v }))
}

/// Cosine decay from `peak` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, peak: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("cosine schedule needs total_steps >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond schedule of {total_steps}")));
    }
    Ok(peak * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let p = Tensor::vector(vec![0.5, -2.0]);
        let (q, _) = adamw_step(&p, &Tensor::zeros(&[2]), &AdamState::zeros(2), 1, 0.1, &cfg(0.0)).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn zero_grad_decay_only() {
        let p = Tensor::vector(vec![1.0, -4.0]);
        let (q, _) = adamw_step(&p, &Tensor::zeros(&[2]), &AdamState::zeros(2), 1, 0.1, &cfg(0.05)).unwrap();
        assert!((q.data()[0] - 0.995).abs() < 1e-15);
        assert!((q.data()[1] + 4.0 * 0.995).abs() < 1e-15);
    }

    #[test]
    fn first_step_hand_computation() {
        let p = Tensor::vector(vec![0.0]);
        let g = Tensor::vector(vec![1.0]);
        let (q, st) = adamw_step(&p, &g, &AdamState::zeros(1), 1, 0.1, &cfg(0.05)).unwrap();
        // m̂ = v̂ = 1
        assert!((q.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((st.m[0] - 0.1).abs() < 1e-15);
        assert!((st.v[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        let p = Tensor::vector(vec![0.0]);
        let bad = Tensor::vector(vec![f64::NAN]);
        assert!(matches!(
            adamw_step(&p, &bad, &AdamState::zeros(1), 1, 0.1, &cfg(0.0)),
            Err(Error::NonFinite(_))
        ));
        assert!(adamw_step(&p, &Tensor::zeros(&[2]), &AdamState::zeros(1), 1, 0.1, &cfg(0.0)).is_err());
        assert!(adamw_step(&p, &Tensor::zeros(&[1]), &AdamState::zeros(1), 0, 0.1, &cfg(0.0)).is_err());
    }

    #[test]
    fn cosine_schedule_anchors() {
        assert_eq!(cosine_lr(0, 100, 0.05).unwrap(), 0.05);
        assert!(cosine_lr(100, 100, 0.05).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.05).unwrap() - 0.025).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 0.05).is_err());
        assert!(cosine_lr(101, 100, 0.05).is_err());
    }
}
