//! Adam with explicit, checkpointable moment buffers.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry the op graph of the backward pass; drop it so
            // the moment buffers do not keep every step's graph alive.
            let mut g = g.detach();
            if c.weight_decay != 0.0 {
                g = (g + (var.as_tensor().detach() * c.weight_decay)?)?;
            }
            let m = match self.m.get(&name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name, v.detach());
        }
        Ok(())
    }

    /// Restore moment buffers, checking that every name is a trainable
    /// parameter of matching shape.
    pub fn restore(
        config: AdamConfig,
        step: u64,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
        store: &ParamStore,
    ) -> Result<Self> {
        for (name, t) in m.iter().chain(v.iter()) {
            let var = store
                .get(name)
                .ok_or_else(|| Error::data(format!("optimizer state for unknown parameter {name}")))?;
            if var.dims() != t.dims() {
                return Err(Error::data(format!(
                    "optimizer state for {name} has shape {:?}, parameter is {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
        }
        Ok(Self { config, step, m, v })
    }
}
