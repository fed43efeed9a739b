use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Slot<T> {
    value: Tensor<T>,
    grad: Vec<T>,
    m: Vec<T>,
    v: Vec<T>,
}

/// Named parameters with their gradient accumulators and AdamW moments.
/// Iteration order is insertion order.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    slots: IndexMap<String, Slot<T>>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            slots: IndexMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let n = value.len();
        self.slots.insert(
            name.into(),
            Slot {
                value,
                grad: vec![T::zero(); n],
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            },
        );
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&[T]> {
        self.slots.get(name).map(|s| s.grad.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for s in self.slots.values_mut() {
            s.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `grad * scale` into the accumulator of `name`.
    pub fn accumulate<U: Real>(&mut self, name: &str, grad: &[U], scale: f64) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if slot.grad.len() != grad.len() {
            return Err(Error::Contract(format!(
                "gradient for `{name}` has {} entries, parameter has {}",
                grad.len(),
                slot.grad.len()
            )));
        }
        for (a, &g) in slot.grad.iter_mut().zip(grad) {
            *a += T::from_f64(g.as_f64() * scale);
        }
        Ok(())
    }

    /// Same parameters converted to another scalar type, optimizer state
    /// reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, s) in &self.slots {
            out.insert(k.clone(), s.value.cast());
        }
        out
    }

    /// One decoupled-weight-decay Adam update at learning rate `lr`.
    pub fn adamw_step(&mut self, cfg: &AdamW, lr: f64) -> Result<()> {
        for (name, s) in &self.slots {
            if s.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    param: name.clone(),
                    message: "non-finite gradient".into(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
        let decay = T::from_f64(1.0 - lr * cfg.weight_decay);
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(cfg.eps);
        for s in self.slots.values_mut() {
            let values = s.value.data_mut();
            for i in 0..values.len() {
                let g = s.grad[i];
                s.m[i] = b1 * s.m[i] + ob1 * g;
                s.v[i] = b2 * s.v[i] + ob2 * g * g;
                let denom = (s.v[i] * inv_bc2).sqrt() + eps;
                values[i] = values[i] * decay - step_size * s.m[i] / denom;
            }
        }
        Ok(())
    }
}

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// One-cycle learning-rate profile: linear warm-up over the first
/// `warmup_fraction` of steps to `peak`, then linear decay reaching zero at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl OneCycle {
    pub fn new(peak: f64, total_steps: usize) -> Self {
        Self {
            peak,
            total_steps,
            warmup_fraction: 0.1,
        }
    }

    /// Learning rate for zero-based step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1);
        let warm = ((total as f64 * self.warmup_fraction).round() as usize).max(1);
        if step < warm {
            self.peak * (step + 1) as f64 / warm as f64
        } else if step >= total {
            0.0
        } else {
            self.peak * (total - step) as f64 / (total + 1 - warm) as f64
        }
    }
}
