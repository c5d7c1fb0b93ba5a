//! Bias-corrected Adam.

use alloc::vec::Vec;

use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 7e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self { config, step: 0, first: alloc::vec![None; store.len()], second: alloc::vec![None; store.len()] }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        Some((self.first[id.index()].as_ref()?, self.second[id.index()].as_ref()?))
    }

    /// One update. Parameters without a gradient in `grads` are treated as
    /// having a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let mut gi = grads.iter().peekable();
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let g = match gi.peek() {
                Some((gid, g)) if *gid == id => {
                    gi.next();
                    Some(g)
                }
                _ => None,
            };
            let param = store.get_mut(id);
            let n = param.len();
            let m = self.first[id.index()].get_or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self.second[id.index()].get_or_insert_with(|| Tensor::zeros(param.shape()));
            let (m, v) = (m.data_mut(), v.data_mut());
            let p = param.data_mut();
            for i in 0..n {
                let gv = g.map_or(0.0, |g| g.data()[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gv;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gv * gv;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.lr * mh / (libm::sqrt(vh) + c.eps);
            }
        }
    }
}
