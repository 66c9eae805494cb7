//! Adam with per-group learning rates.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}

/// Moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// One update. Parameters whose group has no learning rate are left
    /// untouched, as are parameters without a gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: impl Fn(ParamGroup) -> Option<Real>,
    ) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (name, p) in params.iter_mut() {
            let Some(rate) = lr(p.group) else { continue };
            let Some(grad) = grads.get(name) else { continue };
            if grad.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "gradient of {name} has shape {:?}, parameter {:?}",
                    grad.shape(),
                    p.value.shape()
                )));
            }
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                step: 0,
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            st.step += 1;
            let t = st.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let w = p.value.data_mut();
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (i, &gi) in grad.data().iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                w[i] -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", ParamGroup::Fpn, Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        store.insert("b", ParamGroup::Backbone, Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".into(), Tensor::new(vec![2], vec![0.5, -2.0]).unwrap());
        grads.insert("b".into(), Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut store, &grads, |g| (g == ParamGroup::Fpn).then_some(0.1))
            .unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.get("b").unwrap().data(), &[3.0]);
        assert!(!opt.state.contains_key("b"));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", ParamGroup::Fpn, Tensor::zeros(&[1]));
        let mut grads = BTreeMap::new();
        grads.insert("w".into(), Tensor::new(vec![1], vec![Real::NAN]).unwrap());
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.step(&mut store, &grads, |_| Some(0.1)).is_err());
    }
}
