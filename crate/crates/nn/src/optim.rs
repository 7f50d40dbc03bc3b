use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `grads` with learning rate `lr`.
    /// Parameters are visited in id order so updates are reproducible.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>, lr: f64) {
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let mut ids: Vec<ParamId> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            let grad = &grads[&id];
            let value = store.get_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((p, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g + weight_decay * *p;
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let grads = HashMap::from([(id, Tensor::new(&[2], vec![0.5, -3.0]).unwrap())]);
        adam.step(&mut store, &grads, 0.1);
        // Bias correction makes the first step ±lr regardless of gradient scale.
        let v = store.get(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(5.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let x = store.get(id).item();
            let grads = HashMap::from([(id, Tensor::scalar(2.0 * (x - 2.0)))]);
            adam.step(&mut store, &grads, 0.05);
        }
        assert!((store.get(id).item() - 2.0).abs() < 1e-3);
    }
}
