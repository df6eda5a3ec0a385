//! SGD with momentum, the warmup + cosine learning-rate schedule, and
//! order-stable gradient averaging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Tensor};
use crate::{Error, Result};

pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Linear warmup from 0 to `base_lr` over `warmup_epochs`, then cosine decay
/// to 0 at `epochs`. Progress is measured in fractional epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub epochs: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: f64, epochs: f64) -> Result<Self> {
        if !(warmup_epochs >= 0.0 && warmup_epochs < epochs) {
            return Err(Error::Config(format!(
                "warmup ({warmup_epochs}) must be shorter than training ({epochs})"
            )));
        }
        if !(base_lr.is_finite() && base_lr > 0.0) {
            return Err(Error::Config(format!("base lr must be positive, got {base_lr}")));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            epochs,
        })
    }

    pub fn at(&self, epoch: f64) -> f64 {
        if epoch <= self.warmup_epochs && self.warmup_epochs > 0.0 {
            return self.base_lr * (epoch / self.warmup_epochs).max(0.0);
        }
        let span = self.epochs - self.warmup_epochs;
        let p = ((epoch - self.warmup_epochs) / span).clamp(0.0, 1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * p).cos())
    }

    /// Learning rate for optimizer step `step` (0-based), evaluated once the step's batch is consumed.
    pub fn at_step(&self, step: usize, steps_per_epoch: usize) -> f64 {
        self.at((step + 1) as f64 / steps_per_epoch.max(1) as f64)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// `v ← μ·v + g`, `p ← p − lr·v` for every parameter in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let current = store.get(name)?;
            if current.len() != g.len() {
                return Err(Error::InvalidArgument(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    current.len()
                )));
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut data = current.data().to_vec();
            for ((p, vi), gi) in data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *p -= lr * *vi;
            }
            let shape = current.shape().to_vec();
            store.set(name, Tensor::new(shape, data)?)?;
        }
        Ok(())
    }
}

/// Element-wise mean of gradient maps, accumulated in slice order so the
/// result does not depend on how the maps were computed.
pub fn average_gradients(maps: &[GradMap]) -> GradMap {
    let mut acc: GradMap = BTreeMap::new();
    for m in maps {
        for (k, g) in m {
            let slot = acc.entry(k.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (a, v) in slot.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    let n = maps.len().max(1) as f64;
    for g in acc.values_mut() {
        g.iter_mut().for_each(|v| *v /= n);
    }
    acc
}

/// Adds `scale · extra` into `base`.
pub fn add_scaled(base: &mut GradMap, extra: &GradMap, scale: f64) {
    for (k, g) in extra {
        let slot = base.entry(k.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (a, v) in slot.iter_mut().zip(g) {
            *a += scale * v;
        }
    }
}
