use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn push(&mut self, name: String, tensor: Tensor<T>) -> ParamId {
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor with the same-named tensor from `loaded`.
    ///
    /// Names and shapes must match exactly and in order.
    pub fn load_from(&mut self, loaded: Vec<(String, Tensor<T>)>) -> Result<()> {
        if loaded.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: network has {}, source has {}",
                self.tensors.len(),
                loaded.len()
            )));
        }
        for (i, (name, tensor)) in loaded.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Config(format!(
                    "parameter {i}: expected `{}`, found `{name}`",
                    self.names[i]
                )));
            }
            if tensor.shape() != self.tensors[i].shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}`: expected shape {:?}, found {:?}",
                    self.tensors[i].shape(),
                    tensor.shape()
                )));
            }
            self.tensors[i] = tensor;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Allocates and initializes parameters under a hierarchical name prefix.
pub struct ParamBuilder<T> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<T: Element> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.rng.random_range(-bound..=bound)))
            .collect();
        let name = self.full_name(leaf);
        self.store
            .push(name, Tensor::from_vec(shape, data).expect("consistent shape"))
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.full_name(leaf);
        self.store
            .push(name, Tensor::full(shape, T::from_f64_lossy(value)))
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}
