use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

use super::config::AdamConfig;

/// Adam over the gradient buffers of a [`ParamStore`].
///
/// Frozen parameters and parameters whose gradient is exactly zero are left
/// untouched, moments included, so they stay bitwise identical.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u32>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).len()).collect();
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    /// Applies one update from the accumulated gradients divided by
    /// `grad_scale`, then clears them. Returns the ids that moved.
    pub fn step(&mut self, store: &mut ParamStore, grad_scale: f64) -> Result<Vec<ParamId>> {
        let ids: Vec<ParamId> = store.ids().collect();
        if ids.len() != self.m.len() {
            return Err(Error::contract("parameter store changed after the optimizer was built"));
        }
        let live: Vec<ParamId> = ids
            .iter()
            .copied()
            .filter(|&id| !store.is_frozen(id))
            .filter(|&id| store.get(id).grad().is_some_and(|g| g.iter().any(|&x| x != 0.0)))
            .collect();

        let mut sq = 0.0;
        for &id in &live {
            for &g in store.get(id).grad().unwrap_or(&[]) {
                sq += (g / grad_scale) * (g / grad_scale);
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            store.zero_grads();
            return Err(Error::Numerical(format!("gradient norm is {norm}")));
        }
        let clip = match self.config.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        for &id in &live {
            let k = id.index();
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let tensor = store.get_mut(id);
            let grad: Vec<f64> = tensor.grad().unwrap_or(&[]).iter().map(|g| g / grad_scale * clip).collect();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i] + weight_decay * *w;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(live)
    }
}
