//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use super::{DenseArray, ParamBundle};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, DenseArray>,
    v: BTreeMap<String, DenseArray>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies accumulated gradients to every trainable entry, then leaves
    /// the gradients untouched; callers zero them per step.
    pub fn step(&mut self, params: &mut ParamBundle) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, entry) in params.iter_mut() {
            if !entry.trainable {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| DenseArray::zeros(entry.value.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| DenseArray::zeros(entry.value.shape()));
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = entry.grad.data();
            let pd = entry.value.data_mut();
            for i in 0..pd.len() {
                let g = gd[i];
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * g;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * g * g;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * pd[i]);
            }
        }
    }
}
