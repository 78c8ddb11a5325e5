use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_betas(mut self, beta1: f32, beta2: f32) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u32,
}

/// Adam with per-tensor step counters, keyed by name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn step_tensor(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        assert_eq!(param.shape(), grad.shape(), "adam shape mismatch for `{name}`");
        let c = self.config;
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - c.beta1.powi(st.t as i32);
        let bc2 = 1.0 - c.beta2.powi(st.t as i32);
        let step = c.lr / bc1;
        let m = st.m.data_mut();
        let v = st.v.data_mut();
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
            *p -= step * *mi / ((*vi / bc2).sqrt() + c.eps);
        }
    }

    /// Updates every parameter that has a gradient of the same name.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        for (name, p) in params.iter_mut() {
            if let Some(g) = grads.get(name) {
                self.step_tensor(name, p, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut adam = Adam::new(AdamConfig::new(0.01));
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]);
        let g = Tensor::new(&[3], vec![3.0, -0.001, 40.0]);
        adam.step_tensor("p", &mut p, &g);
        let want = [0.99, -1.99, 0.49];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(AdamConfig::new(0.05));
        let mut p = Tensor::new(&[2], vec![3.0, -4.0]);
        for _ in 0..2000 {
            let g = p.map(|v| 2.0 * (v - 1.0));
            adam.step_tensor("p", &mut p, &g);
        }
        assert!(p.data().iter().all(|v| (v - 1.0).abs() < 1e-2));
    }
}
