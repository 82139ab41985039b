use ndarray::Array2;
use rand::Rng;

use super::graph::Gradients;
use super::Tensor;
use crate::error::{Error, Result};

/// Index of a registered parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named trainable tensors with gradient slots, in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<Entry>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.find(name).is_some() {
            return Err(Error::State(format!("parameter `{name}` registered twice")));
        }
        if value.is_empty() {
            return Err(Error::shape("register", format!("parameter `{name}` is empty")));
        }
        let grad = Array2::zeros(value.dim());
        self.entries.push(Entry {
            name: name.to_owned(),
            value,
            grad,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Register a `[rows x cols]` tensor drawn from U(-1/√fan_in, 1/√fan_in).
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound));
        self.register(name, value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Add a backward pass's gradients to the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            let entry = self
                .entries
                .get_mut(id.0)
                .ok_or_else(|| Error::State(format!("unknown parameter index {}", id.0)))?;
            if entry.grad.dim() != g.dim() {
                return Err(Error::shape(
                    "accumulate",
                    format!("gradient for `{}` has wrong shape", entry.name),
                ));
            }
            entry.grad += g;
        }
        Ok(())
    }

    /// Euclidean norm over every gradient slot.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale all gradients so their joint norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let factor = max_norm / norm;
            for e in &mut self.entries {
                e.grad.mapv_inplace(|g| g * factor);
            }
        }
        norm
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.value.iter().chain(e.grad.iter()).all(|v| v.is_finite()))
    }

    /// Copy values (not gradients) from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::State("parameter layouts differ".into()));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.dim() != src.value.dim() {
                return Err(Error::State(format!(
                    "parameter `{}` does not match `{}`",
                    dst.name, src.name
                )));
            }
            dst.value.assign(&src.value);
        }
        Ok(())
    }
}
