use rand::Rng;

use super::{Real, Tensor, TensorError};

/// Identifies which model a parameter leaf on a tape belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StoreKey(pub u8);

impl StoreKey {
    pub const AGENT: StoreKey = StoreKey(0);
    pub const GENERATOR: StoreKey = StoreKey(1);
    pub const SCRATCH: StoreKey = StoreKey(255);
}

/// Named parameter arrays of one model together with their accumulated
/// gradients.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    key: StoreKey,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(key: StoreKey) -> Self {
        Self {
            key,
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn key(&self) -> StoreKey {
        self.key
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.grads.push(vec![T::zero(); value.len()]);
        self.values.push(value);
        self.names.push(name);
        self.values.len() - 1
    }

    /// Adds a parameter drawn uniformly from `[-bound, bound]` with
    /// `bound = sqrt(6 / fan_in)` scaled by `gain`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> usize {
        let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<usize> {
        (0..self.names.len())
            .filter(|&i| self.names[i].starts_with(prefix))
            .collect()
    }

    pub fn value(&self, id: usize) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn grad(&self, id: usize) -> &[T] {
        &self.grads[id]
    }

    pub fn grad_mut(&mut self, id: usize) -> &mut [T] {
        &mut self.grads[id]
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: usize) -> (&mut Tensor<T>, &mut Vec<T>) {
        (&mut self.values[id], &mut self.grads[id])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn zero_grads_of(&mut self, ids: &[usize]) {
        for &id in ids {
            self.grads[id].iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Overwrites a parameter in place, keeping its shape.
    pub fn set(&mut self, id: usize, value: Tensor<T>) -> Result<(), TensorError> {
        if value.shape() != self.values[id].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "param set",
                left: self.values[id].shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.values[id] = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            key: self.key,
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(|g| vec![U::zero(); g.len()]).collect(),
        }
    }
}
