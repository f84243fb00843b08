//! Momentum SGD with coupled weight decay.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `g = grad + wd * p` (decaying parameters only), `v = mu * v + g`
/// (`v = g` on the first step), `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Effective weight decay of the named parameter.
    pub fn decay_for(&self, store: &ParamStore, name: &str) -> Option<f64> {
        let p = store.get(name)?;
        p.kind
            .is_trainable()
            .then(|| if p.kind.decays() { self.config.weight_decay } else { 0.0 })
    }

    /// Applies one update. Parameters without a gradient are treated as
    /// having a zero gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, param) in store.trainable() {
            // Detached so the velocity does not keep old graphs alive.
            let p = param.var.as_tensor().detach();
            let mut g = match grads.get(param.var.as_tensor()) {
                Some(g) => g.detach(),
                None => p.zeros_like()?,
            };
            if param.kind.decays() && self.config.weight_decay > 0.0 {
                g = (g + p.affine(self.config.weight_decay, 0.0)?)?;
            }
            let v = match self.velocity.get(name) {
                Some(prev) => (prev.affine(self.config.momentum, 0.0)? + g)?,
                None => g,
            };
            param.var.set(&(p - v.affine(lr, 0.0)?)?)?;
            self.velocity.insert(name.to_string(), v);
        }
        Ok(())
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: HashMap<String, Tensor> = self.velocity.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        candle_core::safetensors::save(&map, path.as_ref())?;
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
        let map = candle_core::safetensors::load(path.as_ref(), store.device())?;
        let mut velocity = BTreeMap::new();
        for (name, v) in map {
            let p = store
                .get(&name)
                .ok_or_else(|| Error::Config(format!("optimizer state for unknown parameter '{name}'")))?;
            if p.var.dims() != v.dims() {
                return Err(Error::Shape(format!(
                    "optimizer state for '{name}' has shape {:?}",
                    v.dims()
                )));
            }
            velocity.insert(name, v);
        }
        self.velocity = velocity;
        Ok(())
    }
}
