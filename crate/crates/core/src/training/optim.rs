use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Grads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Moment buffers, allocated lazily for parameters that receive gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Option<Vec<f64>>>,
    pub v: Vec<Option<Vec<f64>>>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `w ← w·(1 − ηλ) − η·m̂ / (√v̂ + ε)`.
///
/// Only trainable parameters that have a gradient are touched.
pub fn adamw_step(store: &mut ParamStore, grads: &Grads, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() < store.len() {
        state.m.resize(store.len(), None);
        state.v.resize(store.len(), None);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).len();
        if g.len() != n {
            return Err(Error::arg(format!(
                "gradient for {} has {} entries, parameter has {n}",
                store.name(id),
                g.len()
            )));
        }
        let i = id.index();
        let m = state.m[i].get_or_insert_with(|| vec![0.0; n]);
        let v = state.v[i].get_or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(Error::arg(format!("optimizer state for {} has the wrong shape", store.name(id))));
        }
        let w = store.get_mut(id).data_mut();
        for k in 0..n {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            w[k] = w[k] * (1.0 - lr * cfg.weight_decay) - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        store.round_in_place(id);
    }
    Ok(())
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`, clamped to `lr_min`
/// past the end.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_min;
    }
    let t = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Tensor};

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new(Precision::F64);
        let id = s.insert("w", Tensor::new(vec![1], vec![w]).unwrap()).unwrap();
        (s, id)
    }

    fn grads_for(store: &ParamStore, id: ParamId, g: f64) -> Grads {
        let mut gr = Grads::new(store.len());
        gr.set(id, vec![g]);
        gr
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let (mut s, id) = scalar_store(0.7);
        let g = grads_for(&s, id, 0.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adamw_step(&mut s, &g, &mut AdamState::new(1), 0.1, &cfg).unwrap();
        assert_eq!(s.get(id).data(), &[0.7]);
    }

    #[test]
    fn zero_gradient_with_decay_scales_weights() {
        let (mut s, id) = scalar_store(2.0);
        let g = grads_for(&s, id, 0.0);
        adamw_step(&mut s, &g, &mut AdamState::new(1), 0.01, &AdamConfig::default()).unwrap();
        assert_eq!(s.get(id).data(), &[2.0 * (1.0 - 0.01 * 0.1)]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(1.0);
        let g = grads_for(&s, id, 1.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adamw_step(&mut s, &g, &mut AdamState::new(1), 0.1, &cfg).unwrap();
        assert!((s.get(id).data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let (mut s, id) = scalar_store(1.0);
        s.set_trainable("w", false);
        let g = grads_for(&s, id, 1.0);
        adamw_step(&mut s, &g, &mut AdamState::new(1), 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(s.get(id).data(), &[1.0]);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-5), 1e-4);
        assert_eq!(cosine_lr(100, 100, 1e-4, 1e-5), 1e-5);
        assert_eq!(cosine_lr(150, 100, 1e-4, 1e-5), 1e-5);
        assert!((cosine_lr(50, 100, 1e-4, 1e-5) - 5.5e-5).abs() < 1e-18);
    }

    #[test]
    fn clipping_caps_norm() {
        let (s, id) = scalar_store(0.0);
        let mut g = grads_for(&s, id, -4.0);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 4.0);
        assert_eq!(g.get(id).unwrap(), &[-1.0]);
    }
}
