use serde::{Deserialize, Serialize};

use super::{ParamGroup, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_backbone: f64,
    pub lr_detector: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_detector: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Detector => self.lr_detector,
        }
    }
}

/// First and second moment buffers, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Self {
            config,
            state: AdamState {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        }
    }

    /// One bias-corrected Adam update from the gradients held in `store`.
    /// Parameters without a gradient are left alone. A non-finite gradient
    /// rejects the whole step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.state.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.state.m.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape("adam_step", p.value.shape(), g.shape()));
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
                }
            }
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            let Some(g) = p.grad.as_ref() else {
                continue;
            };
            if !p.requires_grad {
                continue;
            }
            let lr = self.config.lr(p.group);
            let m = self.state.m[id.0].data_mut();
            let v = self.state.v[id.0].data_mut();
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        store.scale_grads(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, group: ParamGroup) -> (ParamStore, super::super::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value), group);
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = store_with(1.5, ParamGroup::Detector);
        s.accumulate_grad(id, &Tensor::scalar(0.0));
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s).unwrap();
        assert_eq!(s.value(id).item(), 1.5);
        assert_eq!(adam.state.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // f(w) = w^2 at w = 1: g = 2, m_hat = 2, v_hat = 4, step = lr * 2 / (2 + eps)
        let (mut s, id) = store_with(1.0, ParamGroup::Detector);
        s.accumulate_grad(id, &Tensor::scalar(2.0));
        let cfg = AdamConfig {
            lr_detector: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &s);
        adam.step(&mut s).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
        assert!((s.value(id).item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn groups_use_their_own_rate() {
        let mut s = ParamStore::new();
        let a = s.add("backbone.w", Tensor::scalar(0.0), ParamGroup::Backbone);
        let b = s.add("detector.w", Tensor::scalar(0.0), ParamGroup::Detector);
        s.accumulate_grad(a, &Tensor::scalar(1.0));
        s.accumulate_grad(b, &Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s).unwrap();
        assert!((s.value(a).item() + 1e-5).abs() < 1e-12);
        assert!((s.value(b).item() + 1e-4).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let (mut s, id) = store_with(1.0, ParamGroup::Detector);
        s.accumulate_grad(id, &Tensor::scalar(f64::NAN));
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let err = adam.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("w"));
        assert_eq!(s.value(id).item(), 1.0);
        assert_eq!(adam.state.t, 0);
    }

    #[test]
    fn step_counter_increments() {
        let (mut s, id) = store_with(1.0, ParamGroup::Detector);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for k in 1..=3 {
            s.zero_grad();
            s.accumulate_grad(id, &Tensor::scalar(1.0));
            adam.step(&mut s).unwrap();
            assert_eq!(adam.state.t, k);
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros([2]), ParamGroup::Detector);
        s.accumulate_grad(a, &Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let before = clip_grad_norm(&mut s, 0.1);
        assert_eq!(before, 5.0);
        let g = s.get(a).grad.as_ref().unwrap();
        assert!((g.data()[0] - 0.06).abs() < 1e-15 && (g.data()[1] - 0.08).abs() < 1e-15);
    }
}
