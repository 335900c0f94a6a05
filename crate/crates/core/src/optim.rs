//! Adam, cosine learning-rate decay and global-norm clipping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("schedule length must be positive")]
    EmptySchedule,
    #[error("step {step} is past the end of a {total}-step schedule")]
    StepOutOfRange { step: usize, total: usize },
    #[error("parameter {index} has {got} values, optimizer state expects {expected}")]
    ShapeMismatch { index: usize, got: usize, expected: usize },
}

pub const DEFAULT_LR0: f64 = 1e-4;
pub const DEFAULT_LR_MIN: f64 = 5e-7;

/// `lr_min + (lr0 - lr_min)·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64, OptimError> {
    if total == 0 {
        return Err(OptimError::EmptySchedule);
    }
    if step > total {
        return Err(OptimError::StepOutOfRange { step, total });
    }
    let t = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> AdamState {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { step: 0, m, v }
    }
}

/// One bias-corrected Adam update over parallel parameter/gradient lists.
pub fn adam_step<P: AsMut<[f64]>>(
    params: &mut [P],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<(), OptimError> {
    for (index, ((p, g), m)) in params.iter_mut().zip(grads).zip(&state.m).enumerate() {
        let p = p.as_mut();
        if p.len() != g.len() || p.len() != m.len() {
            return Err(OptimError::ShapeMismatch { index, got: g.len(), expected: p.len() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let p = p.as_mut();
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, DEFAULT_LR0, DEFAULT_LR_MIN).unwrap(), 1e-4);
        assert!((cosine_lr(100, 100, DEFAULT_LR0, DEFAULT_LR_MIN).unwrap() - 5e-7).abs() < 1e-20);
        let mid = cosine_lr(50, 100, DEFAULT_LR0, DEFAULT_LR_MIN).unwrap();
        assert!((mid - (1e-4 + 5e-7) / 2.0).abs() < 1e-18);
        assert_eq!(cosine_lr(0, 0, 1.0, 0.0), Err(OptimError::EmptySchedule));
        assert!(cosine_lr(5, 4, 1.0, 0.0).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let lrs: Vec<f64> = (0..=40).map(|s| cosine_lr(s, 40, 1e-3, 1e-6).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![vec![1.0, -2.0], vec![3.0]];
        let before = p.clone();
        let g = vec![vec![0.0, 0.0], vec![0.0]];
        let mut st = AdamState::new([2, 1]);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        // At t = 1 the corrected moments are g and g², so the step is
        // lr·g/(|g| + eps).
        let mut p = vec![vec![0.5, 0.5, 0.5]];
        let g = vec![vec![2.0, -0.01, 1e-3]];
        let mut st = AdamState::new([3]);
        let lr = 0.01;
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), lr).unwrap();
        for (pi, gi) in p[0].iter().zip(&g[0]) {
            let expect = 0.5 - lr * gi / (gi.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-15, "{pi} {expect}");
        }
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x - 0.1)^2 from x = 0.
        for lr0 in [0.005, 0.008] {
            let mut p = vec![vec![0.0]];
            let mut st = AdamState::new([1]);
            for s in 0..100 {
                let g = vec![vec![2.0 * (p[0][0] - 0.1)]];
                let lr = cosine_lr(s, 99, lr0, 1e-6).unwrap();
                adam_step(&mut p, &g, &mut st, &AdamConfig::default(), lr).unwrap();
            }
            assert!((p[0][0] - 0.1).abs() < 1e-3, "{lr0}: {}", p[0][0]);
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![vec![0.3]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.3]]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![vec![0.0; 2]];
        let mut st = AdamState::new([2]);
        let err = adam_step(&mut p, &[vec![0.0; 3]], &mut st, &AdamConfig::default(), 0.1);
        assert!(matches!(err, Err(OptimError::ShapeMismatch { .. })));
        assert_eq!(st.step, 0);
    }
}
