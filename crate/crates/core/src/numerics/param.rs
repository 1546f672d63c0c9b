use std::collections::BTreeMap;

use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{hash_str, SplitMix64};

/// Gradients keyed by parameter name.
pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

/// A named tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Parameters ordered lexicographically by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            name.clone(),
            Parameter {
                name,
                value,
                grad,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `grads` into the matching gradient buffers.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) -> Result<()> {
        for (name, g) in grads {
            self.get_mut(name)?.grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Copies values (not gradients) into another precision.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in self.params.values() {
            out.insert(p.name.clone(), p.value.cast())
                .expect("names are unique");
        }
        out
    }

    /// Merges another set, rejecting name collisions.
    pub fn extend(&mut self, other: ParamSet<T>) -> Result<()> {
        for (name, p) in other.params {
            self.insert(name, p.value)?;
        }
        Ok(())
    }
}

/// Deterministic initializer: every tensor draws from a generator seeded by
/// `(seed, name)`, so values do not depend on creation order.
pub struct Initializer<'a, T> {
    seed: u64,
    params: &'a mut ParamSet<T>,
}

impl<'a, T: Real> Initializer<'a, T> {
    pub fn new(seed: u64, params: &'a mut ParamSet<T>) -> Self {
        Self { seed, params }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let mut rng = SplitMix64::new(hash_str(self.seed, name));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.uniform(-bound, bound))).collect();
        self.params.insert(name, Tensor::from_vec(shape, data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.params.insert(name, Tensor::full(shape, T::of(value)))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.constant(name, shape, 0.0)
    }

    /// He-style uniform bound `sqrt(6 / fan_in)` for convolutions.
    pub fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        self.uniform(name, shape, (6.0 / fan_in as f64).sqrt())
    }

    /// Glorot uniform bound `sqrt(6 / (fan_in + fan_out))` for dense layers.
    pub fn glorot_uniform(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.uniform(
            name,
            &[fan_in, fan_out],
            (6.0 / (fan_in + fan_out) as f64).sqrt(),
        )
    }
}
