use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Slot {
    pub(crate) value: Tensor,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl Slot {
    fn new(value: Tensor) -> Self {
        let n = value.len();
        Self {
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Named trainable tensors with their Adam moment accumulators.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    pub(crate) slots: BTreeMap<String, Slot>,
    pub(crate) step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a parameter, resetting its optimizer state.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.slots.insert(name.into(), Slot::new(value));
    }

    /// Inserts a `fan_in × fan_out` matrix drawn uniformly from
    /// `±sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot<R: Rng + ?Sized>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) {
        let limit = if fan_in + fan_out == 0 {
            0.0
        } else {
            (6.0 / (fan_in + fan_out) as f64).sqrt()
        };
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-1.0..=1.0) * limit)
            .collect();
        self.insert(name, Tensor::from_parts(vec![fan_in, fan_out], data));
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    /// Overwrites the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParameterStore::set",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Number of optimizer steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// First and second moment accumulators of a parameter.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.slots.get(name).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }
}

/// Adam hyperparameters; `Default` gives β1 = 0.9, β2 = 0.999, ε = 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// One bias-corrected Adam update. `grads` must cover every parameter
    /// in the store with matching shapes.
    pub fn step(&self, store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, slot) in &store.slots {
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
            if g.shape() != slot.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: slot.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
        }
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, slot) in store.slots.iter_mut() {
            let g = grads[name].data();
            let Slot { value, m, v } = slot;
            for (((p, m), v), &g) in value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn store_with(name: &str, values: &[f64]) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, Tensor::vector(values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = store_with("w", &[1.0, -2.0]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        Adam::with_lr(0.1).step(&mut store, &grads).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut store = store_with("w", &[0.0, 0.0, 0.0]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![3.0, -0.25, 1e-3]).unwrap())]);
        Adam::with_lr(0.01).step(&mut store, &grads).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] + 0.01).abs() < 1e-8);
        assert!((w[1] - 0.01).abs() < 1e-8);
        assert!((w[2] + 0.01).abs() < 1e-7);
    }

    #[test]
    fn missing_key_is_an_error() {
        let mut store = store_with("w", &[0.0]);
        let grads = BTreeMap::new();
        assert_eq!(
            Adam::default().step(&mut store, &grads).unwrap_err(),
            TensorError::MissingGradient("w".into())
        );
        assert_eq!(store.step(), 0);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut store = store_with("w", &[0.0]);
        let adam = Adam::with_lr(0.1);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let w = tape.param(&store, "w").unwrap();
            let d = tape.add_scalar(w, -3.0).unwrap();
            let sq = tape.square(d).unwrap();
            let loss = tape.sum(sq).unwrap();
            let grads = tape.backward(loss).unwrap().for_store(&store);
            adam.step(&mut store, &grads).unwrap();
        }
        let w = store.get("w").unwrap().item();
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn moments_match_parameter_shape() {
        let mut rng = rand::rng();
        let mut store = ParameterStore::new();
        store.insert_glorot("a", 3, 5, &mut rng);
        let (m, v) = store.moments("a").unwrap();
        assert_eq!(m.len(), 15);
        assert_eq!(v.len(), 15);
        let limit = (6.0f64 / 8.0).sqrt();
        assert!(store.get("a").unwrap().data().iter().all(|x| x.abs() <= limit));
    }
}
