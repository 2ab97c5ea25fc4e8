use std::collections::BTreeMap;

use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update in place and return the per-parameter deltas that were
    /// added. Parameters without a gradient entry are left untouched.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Tensor>,
    ) -> BTreeMap<String, Tensor> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        let mut deltas = BTreeMap::new();
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let mut delta = Tensor::zeros(g.shape());
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let d = -lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                delta.data_mut()[i] = d;
                p.data_mut()[i] += d;
            }
            deltas.insert(name.clone(), delta);
        }
        deltas
    }
}
