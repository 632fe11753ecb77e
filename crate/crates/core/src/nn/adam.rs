use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `θ ← θ − lr·wd·θ` before the update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Adam with bias correction. Moments and step counts are kept per
/// parameter, so a parameter only advances when it receives a gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, state: HashMap::new() }
    }

    /// Number of updates applied so far to `id`.
    pub fn steps(&self, id: ParamId) -> u64 {
        self.state.get(&id).map_or(0, |s| s.t)
    }

    /// Applies one update to every parameter present in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        for (id, g) in grads.iter() {
            if id.index() >= store.len() || !store.is_trainable(id) {
                return Err(Error::Contract(format!("gradient for unknown parameter #{}", id.index())));
            }
            let param = store.get_mut(id);
            if param.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("param {:?}, grad {:?}", param.shape(), g.shape()),
                });
            }
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            let p = param.data_mut();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                if weight_decay != 0.0 {
                    p[i] -= lr * weight_decay * p[i];
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn one_param(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(value)).unwrap();
        (store, id)
    }

    fn grads(id: ParamId, g: f64) -> Gradients {
        let mut map = BTreeMap::new();
        map.insert(id, Tensor::scalar(g));
        Gradients::new(map, vec![id])
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut store, id) = one_param(0.7);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &grads(id, 0.0)).unwrap();
        assert_eq!(store.get(id).item(), 0.7);
    }

    #[test]
    fn first_step_size() {
        let (mut store, id) = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.001));
        adam.step(&mut store, &grads(id, 1.0)).unwrap();
        let want = -0.001 / (1.0 + 1e-8);
        assert!((store.get(id).item() - want).abs() < 1e-15);
        assert_eq!(adam.steps(id), 1);
    }

    #[test]
    fn matches_scalar_reimplementation() {
        let cfg = AdamConfig { lr: 0.01, weight_decay: 0.1, ..AdamConfig::default() };
        let (mut store, id) = one_param(1.5);
        let mut adam = Adam::new(cfg);
        let gs = [0.3, 0.3, -1.2];
        let (mut p, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            adam.step(&mut store, &grads(id, g)).unwrap();
            let t = (t + 1) as i32;
            p -= cfg.lr * cfg.weight_decay * p;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            assert!((store.get(id).item() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lr_only_applies_decay() {
        let cfg = AdamConfig { lr: 0.0, weight_decay: 0.5, ..AdamConfig::default() };
        let (mut store, id) = one_param(2.0);
        Adam::new(cfg).step(&mut store, &grads(id, 3.0)).unwrap();
        assert_eq!(store.get(id).item(), 2.0);
    }

    #[test]
    fn unknown_parameter_rejected() {
        let (mut store, _) = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut store, &grads(ParamId(5), 1.0)), Err(Error::Contract(_))));
    }
}
