//! Named parameter storage shared by the network, discriminator and
//! optimiser.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Puts every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    /// Gradients of a bound store after `tape.backward`; parameters the
    /// backward pass never reached get zeros.
    pub fn grads(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|((_, t), &v)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Handles in store order from an explicit list (used by gradient checks).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }
}

/// `U(-bound, bound)` draw computed in `f64` so precisions share a stream.
pub fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Fan-in scaled uniform initialisation.
pub fn fan_in<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    uniform(rng, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
}
