//! Adam with bias correction, plus global-norm gradient clipping.

use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::nn::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .params
            .iter()
            .map(|p| alloc::vec![0.0; p.value.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One Adam update of every parameter in place.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: grads.len(),
        });
    }
    for (p, g) in params.params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.value.shape(),
                rhs: g.shape(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - Float::powi(cfg.beta1, t);
    let c2 = 1.0 - Float::powi(cfg.beta2, t);
    for (k, (p, g)) in params.params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, w) in p.value.data.iter_mut().enumerate() {
            let gi = g.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= cfg.lr * mh / (Float::sqrt(vh) + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum();
    let norm = Float::sqrt(sq);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn store(v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::row_vector(v));
        s
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = store(vec![1.0, -2.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(1, 2)], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.params[0].value.data, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = store(vec![0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[Tensor::row_vector(vec![0.3, -7.0])], &mut st, &cfg).unwrap();
        // m_hat = g, v_hat = g^2, so the update is -lr g / (|g| + eps)
        let d = &p.params[0].value.data;
        assert!((d[0] + 1e-3 * 0.3 / (0.3 + 1e-8)).abs() < 1e-18);
        assert!((d[1] - 1e-3 * 7.0 / (7.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn opposite_steps_nearly_cancel() {
        let mut p = store(vec![1.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, &cfg).unwrap();
        adam_step(&mut p, &[Tensor::scalar(-1.0)], &mut st, &cfg).unwrap();
        // step 2: m_hat = (0.09 - 0.1) / 0.19, v_hat = 1, update ~ +5.26e-5 lr-units
        let x = p.params[0].value.data[0];
        let m2 = (0.9 * 0.1 - 0.1) / (1.0 - 0.81);
        let want = 1.0 - 1e-3 / (1.0 + 1e-8) - 1e-3 * m2 / (1.0 + 1e-8);
        assert!((x - want).abs() < 1e-15);
        assert!((x - 1.0).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = store(vec![1.0, 2.0]);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &[Tensor::zeros(2, 1)], &mut st, &AdamConfig::default()).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::row_vector(vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data[0] - 0.6).abs() < 1e-15);
    }
}
