use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moments are `f32` and keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    /// Number of updates applied.
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params.params() {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self { config, t: 0, m, v })
    }

    pub fn updates(&self) -> u64 {
        self.t
    }

    /// Applies one update. Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in params.params() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            *m = (m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?;
            *v = (v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let denom = v.affine(1.0 / c2, 0.0)?.sqrt()?.affine(1.0, eps)?;
            let update = m.affine(lr / c1, 0.0)?.div(&denom)?;
            var.set(&var.as_tensor().sub(&update)?)?;
        }
        Ok(())
    }

    /// Moments under `adam.m.<name>` / `adam.v.<name>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("adam.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("adam.v.{k}"), t.clone());
        }
        out
    }

    pub fn restore(&mut self, tensors: &BTreeMap<String, Tensor>, updates: u64) -> Result<()> {
        for (prefix, store) in [("adam.m.", &mut self.m), ("adam.v.", &mut self.v)] {
            for (name, slot) in store.iter_mut() {
                let t = tensors
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::InvalidArgument(format!("optimizer state lacks {prefix}{name}")))?;
                if t.dims() != slot.dims() {
                    return Err(Error::shape(format!("{:?}", slot.dims()), format!("{:?}", t.dims())));
                }
                *slot = t.to_dtype(DType::F32)?;
            }
        }
        self.t = updates;
        Ok(())
    }
}

/// Gradients for every trainable parameter, cast to `f32` and divided by `scale`.
/// Returns `None` when any entry is non-finite.
pub fn collect_grads(params: &ParamStore, grads: &GradStore, scale: f64) -> Result<Option<BTreeMap<String, Tensor>>> {
    let mut out = BTreeMap::new();
    let mut sum_sq = 0.0f64;
    for (name, var) in params.params() {
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F32)?.affine(1.0 / scale, 0.0)?,
            None => var.zeros_like()?,
        };
        sum_sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        out.insert(name.clone(), g);
    }
    Ok(sum_sq.is_finite().then_some(out))
}

/// Dynamic loss scaling for reduced-precision backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub scale: f64,
    pub good_steps: u64,
}

impl LossScaler {
    pub const INITIAL: f64 = 32768.0;
    pub const GROWTH_INTERVAL: u64 = 2000;
    const MIN_SCALE: f64 = 1.0;

    pub fn new() -> Self {
        Self {
            scale: Self::INITIAL,
            good_steps: 0,
        }
    }

    /// Records whether the last scaled backward pass overflowed.
    pub fn update(&mut self, finite: bool) {
        if finite {
            self.good_steps += 1;
            if self.good_steps >= Self::GROWTH_INTERVAL {
                self.scale *= 2.0;
                self.good_steps = 0;
            }
        } else {
            self.scale = (self.scale / 2.0).max(Self::MIN_SCALE);
            self.good_steps = 0;
        }
    }
}

impl Default for LossScaler {
    fn default() -> Self {
        Self::new()
    }
}
