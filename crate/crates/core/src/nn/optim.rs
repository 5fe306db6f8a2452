//! Stochastic gradient descent with heavy-ball momentum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::Grads;
use super::tensor::Float;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v` for every parameter with a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        let mu = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        let lr = T::lit(lr);
        let mut ids: Vec<ParamId> = grads.param_ids().collect();
        ids.sort();
        for id in ids {
            if !store.entry(id).is_trainable() {
                continue;
            }
            let g = grads.param(id).expect("listed gradient");
            let p = store.get_mut(id);
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![T::zero(); g.numel()]);
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gv + wd * *pv;
                *vv = mu * *vv + d;
                *pv -= lr * *vv;
            }
        }
    }
}
