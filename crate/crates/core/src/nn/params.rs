use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Index of a parameter slot in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors in registration order.
///
/// Names are unique; checkpoints sort by name, so registration order only
/// matters for the random initialization sequence.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter slot `{name}`")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
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

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    /// Gradients of every slot after `g.backward`, in slot order.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Result<Vec<Tensor<T>>> {
        bound
            .0
            .iter()
            .zip(&self.names)
            .map(|(&v, name)| {
                g.grad(v)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))
            })
            .collect()
    }
}

/// Graph handles for every slot of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Seeded parameter initializers. Values are drawn in `f64` and then cast,
/// so `f32` and `f64` models built from one seed agree up to rounding.
pub struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Init { rng }
    }

    /// Xavier/Glorot uniform for a `fan_in × fan_out` weight.
    pub fn xavier<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        Tensor::from_fn(vec![fan_in, fan_out], |_| T::of(dist.sample(self.rng)))
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("valid std");
        Tensor::from_fn(shape.to_vec(), |_| T::of(dist.sample(self.rng)))
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        self.rng
    }
}
