//! Adam over a fixed subset of a [`ParamStore`].

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math;
use crate::tape::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(invalid("Adam needs lr > 0, betas in [0, 1) and eps > 0"))
        }
    }
}

/// Minimizes: each step moves against the accumulated gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    /// Per-parameter learning-rate multipliers.
    scale: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore, ids: Vec<ParamId>) -> Result<Self> {
        cfg.validate()?;
        let zeros = |id: &ParamId| {
            let (r, c) = store.get(*id).value.shape();
            Matrix::zeros(r, c)
        };
        let m = ids.iter().map(zeros).collect();
        let v = ids.iter().map(zeros).collect();
        let scale = vec![1.0; ids.len()];
        Ok(Adam { cfg, ids, m, v, scale, t: 0 })
    }

    /// Multiplies the learning rate of parameter `id` by `k`.
    pub fn set_lr_scale(&mut self, id: ParamId, k: f64) -> Result<()> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(invalid("learning-rate scale must be positive"));
        }
        let pos = self
            .ids
            .iter()
            .position(|&i| i == id)
            .ok_or_else(|| invalid("parameter is not managed by this optimizer"))?;
        self.scale[pos] = k;
        Ok(())
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.m, &self.v)
    }

    /// Replaces the step count and moment estimates, e.g. from a checkpoint.
    pub fn restore(&mut self, t: u64, m: Vec<Matrix>, v: Vec<Matrix>) -> Result<()> {
        let fits =
            |xs: &[Matrix]| xs.len() == self.m.len() && xs.iter().zip(&self.m).all(|(a, b)| a.shape() == b.shape());
        if !fits(&m) || !fits(&v) {
            return Err(invalid("optimizer state does not match the parameters"));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let t = self.t as f64;
        let bc1 = 1.0 - math::exp(t * math::log(beta1.max(f64::MIN_POSITIVE)));
        let bc2 = 1.0 - math::exp(t * math::log(beta2.max(f64::MIN_POSITIVE)));
        for (k, id) in self.ids.iter().enumerate() {
            let p = store.get_mut(*id);
            let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
            let g = p.grad.as_slice();
            let w = p.value.as_mut_slice();
            let lr = lr * self.scale[k];
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * mh / (math::sqrt(vh) + eps);
            }
        }
    }
}
