//! Named parameter registry with per-parameter freeze flags and the Adam
//! optimizer (classic L2 coupling: decay is added to the raw gradient).

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Fnv1a;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

struct Slot {
    tensor: Tensor,
    trainable: bool,
    /// Whether weight decay applies; false for LayerNorm scale/shift and
    /// bias vectors.
    decay: bool,
    m: Array2<f64>,
    v: Array2<f64>,
    step: u64,
}

/// Registry mapping parameter names to tensors plus optimizer state.
#[derive(Default)]
pub struct ModelParams {
    slots: BTreeMap<String, Slot>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a leaf tensor under a unique name.
    pub fn register(&mut self, name: &str, tensor: Tensor, trainable: bool, decay: bool) {
        assert!(tensor.is_leaf(), "parameter {name} must be a leaf tensor");
        assert!(
            !self.slots.contains_key(name),
            "duplicate parameter name {name}"
        );
        tensor.set_requires_grad(trainable);
        let shape = tensor.shape();
        self.slots.insert(
            name.to_string(),
            Slot {
                tensor,
                trainable,
                decay,
                m: Array2::zeros(shape),
                v: Array2::zeros(shape),
                step: 0,
            },
        );
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.slots
            .get(name)
            .map(|s| s.tensor.clone())
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.slots
            .get(name)
            .map(|s| s.trainable)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Flip every parameter's trainable flag to `pred(name)`; returns the
    /// number of trainable scalars afterwards.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        for (name, slot) in self.slots.iter_mut() {
            slot.trainable = pred(name);
            slot.tensor.set_requires_grad(slot.trainable);
        }
        self.trainable_scalars()
    }

    /// Set the flag for an explicit name list; unknown names are an error.
    pub fn set_trainable_names(&mut self, names: &[&str], trainable: bool) -> Result<usize> {
        for &name in names {
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            slot.trainable = trainable;
            slot.tensor.set_requires_grad(trainable);
        }
        Ok(self.trainable_scalars())
    }

    pub fn trainable_scalars(&self) -> usize {
        self.slots
            .values()
            .filter(|s| s.trainable)
            .map(|s| {
                let (r, c) = s.tensor.shape();
                r * c
            })
            .sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.slots
            .values()
            .map(|s| {
                let (r, c) = s.tensor.shape();
                r * c
            })
            .sum()
    }

    /// One Adam update with bias correction over the trainable parameters.
    /// Every trainable parameter must carry a gradient; frozen parameters
    /// are untouched. All gradients are cleared afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for (name, slot) in self.slots.iter_mut() {
            if !slot.trainable {
                slot.tensor.zero_grad();
                continue;
            }
            let mut grad = slot
                .tensor
                .take_grad()
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if cfg.weight_decay != 0.0 && slot.decay {
                let values = slot.tensor.to_array();
                grad.zip_mut_with(&values, |g, &w| *g += cfg.weight_decay * w);
            }
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            slot.m.zip_mut_with(&grad, |m, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            });
            slot.v.zip_mut_with(&grad, |v, &g| {
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            });
            let (m, v) = (&slot.m, &slot.v);
            slot.tensor.update_value(|w| {
                for ((w, &m), &v) in w.iter_mut().zip(m.iter()).zip(v.iter()) {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            });
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for slot in self.slots.values() {
            slot.tensor.zero_grad();
        }
    }

    /// Copy of all parameter values, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Array2<f64>> {
        self.slots
            .iter()
            .map(|(k, s)| (k.clone(), s.tensor.to_array()))
            .collect()
    }

    /// Overwrite values from a snapshot; names must be registered and
    /// shapes must match.
    pub fn load(&mut self, values: &BTreeMap<String, Array2<f64>>) -> Result<()> {
        for name in values.keys() {
            if !self.slots.contains_key(name) {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        for (name, slot) in self.slots.iter_mut() {
            if let Some(v) = values.get(name) {
                if v.dim() != slot.tensor.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "parameter {name}: checkpoint {:?} vs model {:?}",
                        v.dim(),
                        slot.tensor.shape()
                    )));
                }
                slot.tensor.update_value(|w| w.assign(v));
            }
        }
        Ok(())
    }

    /// FNV-1a fingerprint over the values of all parameters selected by
    /// `pred`, in name order. Used to verify frozen-parameter immutability.
    pub fn value_fingerprint(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut h = Fnv1a::new();
        for (name, slot) in &self.slots {
            if pred(name) {
                h.update(name.as_bytes());
                for &x in slot.tensor.value().iter() {
                    h.update(&x.to_le_bytes());
                }
            }
        }
        h.finish()
    }
}

/// Xavier-uniform initialization: U(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}
