use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state: first/second moments aligned with a parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState) -> Result<()> {
    let cfg = state.config;
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step parameter count",
            &[params.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::shape(
                format!("adam_step tensor {i}"),
                p.shape(),
                g.shape(),
            ));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let m = state.m[i].data();
        let v = state.v[i].data();
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            let mut update = mhat / (vhat.sqrt() + cfg.eps);
            if cfg.weight_decay > 0.0 {
                update += cfg.weight_decay * *pj;
            }
            *pj -= cfg.lr * update;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let orig = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(cfg(0.1), &[&p]);
        adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert_eq!(p, orig);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_scalar() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = -lr · 1/(1 + ε).
        let mut p = Tensor::from_vec(vec![0.0]);
        let g = Tensor::from_vec(vec![1.0]);
        let mut st = AdamState::new(cfg(0.1), &[&p]);
        adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn copied_state_is_bit_identical() {
        let p0 = Tensor::from_vec(vec![0.3, -0.7]);
        let g = Tensor::from_vec(vec![0.11, -0.05]);
        let mut st = AdamState::new(cfg(0.01), &[&p0]);
        let mut warm = p0.clone();
        adam_step(&mut [&mut warm], &[&g], &mut st).unwrap();

        let mut a = warm.clone();
        let mut b = warm.clone();
        let mut sa = st.clone();
        let mut sb = st.clone();
        adam_step(&mut [&mut a], &[&g], &mut sa).unwrap();
        adam_step(&mut [&mut b], &[&g], &mut sb).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(cfg(0.1), &[&p]);
        let err = adam_step(&mut [&mut p], &[&g], &mut st).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn nonpositive_lr_rejected() {
        let mut p = Tensor::zeros(&[1]);
        let g = Tensor::zeros(&[1]);
        let mut st = AdamState::new(cfg(0.0), &[&p]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut st).is_err());
    }

    #[test]
    fn decoupled_weight_decay_shrinks() {
        let mut p = Tensor::from_vec(vec![2.0]);
        let g = Tensor::zeros(&[1]);
        let mut st = AdamState::new(
            AdamConfig {
                lr: 0.1,
                weight_decay: 0.5,
                ..AdamConfig::default()
            },
            &[&p],
        );
        adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert!((p.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
