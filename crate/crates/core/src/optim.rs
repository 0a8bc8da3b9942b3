//! Adam with bias correction.

use crate::error::Result;
use crate::net::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            step: 0,
            m: ParamSet::zeros_like(params),
            v: ParamSet::zeros_like(params),
        }
    }
}

/// One update in place. Weights and moments are rounded to `f32` afterwards,
/// so a checkpoint taken at any step restores the exact training state.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, lr: f64, cfg: AdamConfig) -> Result<()> {
    params.ensure_same_layout(grads)?;
    params.ensure_same_layout(&state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((w, g), m), v) in params
        .values
        .iter_mut()
        .zip(&grads.values)
        .zip(state.m.values.iter_mut())
        .zip(state.v.values.iter_mut())
    {
        for i in 0..w.len() {
            let gi = g[i];
            m[i] = (cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi) as f32 as f64;
            v[i] = (cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi) as f32 as f64;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] = (w[i] - lr * mhat / (vhat.sqrt() + cfg.eps)) as f32 as f64;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64) -> ParamSet {
        ParamSet {
            names: vec!["w".into()],
            shapes: vec![vec![1]],
            values: vec![vec![w]],
        }
    }

    #[test]
    fn first_step_hand_trace() {
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, 0.1, AdamConfig::default()).unwrap();
        // m_hat = 1, v_hat = 1: w = -0.1 / (1 + 1e-8)
        let expected = (-0.1 / (1.0 + 1e-8)) as f32 as f64;
        assert_eq!(p.values[0][0], expected);
        assert!((p.values[0][0] + 0.0999999990).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = scalar(0.5);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &scalar(2.0), &mut s, 0.0, AdamConfig::default()).unwrap();
        assert_eq!(p.values[0][0], 0.5);
        let (m, v) = (s.m.values[0][0], s.v.values[0][0]);
        adam_step(&mut p, &scalar(0.0), &mut s, 0.0, AdamConfig::default()).unwrap();
        assert!((s.m.values[0][0] - 0.9 * m).abs() < 1e-7);
        assert!((s.v.values[0][0] - 0.999 * v).abs() < 1e-7);
        assert_eq!(p.values[0][0], 0.5);
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut p = ParamSet {
            names: vec!["a".into()],
            shapes: vec![vec![2]],
            values: vec![vec![0.25, 0.25]],
        };
        let g = ParamSet {
            values: vec![vec![-0.3, -0.3]],
            ..p.clone()
        };
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut s, 0.01, AdamConfig::default()).unwrap();
        }
        assert_eq!(p.values[0][0], p.values[0][1]);
        assert!(p.values[0][0] > 0.25);
    }
}
