use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are exposed by name so
/// that they can be checkpointed and restored.
#[derive(Debug)]
pub struct AdamW {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    config: AdamWConfig,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, config: AdamWConfig) -> Result<Self> {
        let m = params.iter().map(|(_, p)| p.as_tensor().zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { params, m, v, step: 0, config })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else { continue };
            let m = ((&self.m[i] * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let decayed = (p.as_tensor() * (1.0 - c.lr * c.weight_decay))?;
            p.set(&(decayed - (update * c.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// `(name -> first moment, name -> second moment)`.
    pub fn state(&self) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
        let m = self.params.iter().zip(&self.m).map(|((n, _), t)| (n.clone(), t.clone())).collect();
        let v = self.params.iter().zip(&self.v).map(|((n, _), t)| (n.clone(), t.clone())).collect();
        (m, v)
    }

    pub fn restore(&mut self, step: usize, m: &BTreeMap<String, Tensor>, v: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            let (Some(mi), Some(vi)) = (m.get(name), v.get(name)) else {
                return Err(Error::Malformed { what: "optimizer state".into(), reason: format!("missing moments for {name}") });
            };
            if mi.dims() != p.dims() || vi.dims() != p.dims() {
                return Err(Error::ShapeMismatch(format!("optimizer moments for {name}")));
            }
            self.m[i] = mi.to_dtype(p.dtype())?;
            self.v[i] = vi.to_dtype(p.dtype())?;
        }
        self.step = step;
        Ok(())
    }
}
