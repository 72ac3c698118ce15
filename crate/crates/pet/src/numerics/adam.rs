//! Adam with decoupled weight decay.

use super::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state aligned with a [`ParamStore`]'s registration order.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.iter().map(|(_, e)| vec![0.0; e.value.numel()]).collect();
        let v = store.iter().map(|(_, e)| vec![0.0; e.value.numel()]).collect();
        Adam { cfg, m, v, t: 0 }
    }

    /// One update from the gradients accumulated in `store`. `lr_for` maps a
    /// parameter name to its learning rate (backbone vs transformer groups).
    pub fn step(&mut self, store: &mut ParamStore, lr_for: impl Fn(&str) -> f64) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let lr = lr_for(&store.entry(id).name);
            let grad = store.entry(id).grad.clone();
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let value = store.value_mut(id);
            for (i, w) in value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store
            .register("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        store.add_scaled_grad(id, &[0.5, -0.25], 1.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, |_| 0.1);
        let w = store.value(id).data();
        // bias-corrected first step is lr * g / (|g| + eps) = lr * sign(g)
        assert!((w[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((w[1] - (-1.0 + 0.1)).abs() < 1e-6);
    }
}
