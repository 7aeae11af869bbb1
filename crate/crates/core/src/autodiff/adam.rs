use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{FwpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: ParamSet,
    pub second: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.first) {
        return Err(FwpError::Shape("adam: parameters, gradients and moments differ in layout".into()));
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let moments = state.first.iter_mut().zip(state.second.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let p = p.as_mut_slice();
        let m = m.as_mut_slice();
        let v = v.as_mut_slice();
        for i in 0..p.len() {
            let gi = g.as_slice()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;

    fn params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a", Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = params();
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &before.zeros_like(), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.get_mut("a").unwrap().as_mut_slice().copy_from_slice(&[0.3, -7.0, 1e-3]);
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut st).unwrap();
        let moved = p.get("a").unwrap().sub(before.get("a").unwrap());
        for (d, gi) in moved.as_slice().iter().zip(g.get("a").unwrap().as_slice()) {
            assert!((d + 1e-3 * gi.signum()).abs() < 1e-7, "{d}");
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = params();
            let mut st = AdamState::new(&p, AdamConfig::default());
            for i in 0..10 {
                let mut g = p.clone();
                g.scale(0.1 * i as f64);
                adam_step(&mut p, &g, &mut st).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping() {
        let mut g = ParamSet::new();
        g.insert("a", Mat::from_vec(1, 2, vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        let mut small = g.clone();
        small.scale(0.5);
        let copy = small.clone();
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, copy);
    }
}
