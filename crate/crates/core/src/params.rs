//! Named parameter tensors and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Name-keyed collection of parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every entry of `other` whose name starts with `prefix`.
    pub fn extend_from(&mut self, other: &ParamSet<T>, prefix: &str) {
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.insert(name, t.clone());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape("unflatten", &[self.num_scalars()], &[flat.len()]));
        }
        let mut offset = 0;
        for t in self.tensors.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Flattened gradients in the same order as [`ParamSet::flatten`].
    pub fn flat_grad(&self) -> Vec<T> {
        self.tensors
            .values()
            .flat_map(|t| match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); t.len()],
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Sum of squared gradient entries over parameters whose name has `prefix`.
    pub fn grad_norm_sq(&self, prefix: &str) -> T {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter().map(|v| *v * *v))
            .sum()
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape product").with_grad();
        self.insert(name, t);
    }
}

/// Tape handles for a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Registers every parameter on the tape; `trainable(name)` decides
    /// whether gradients are tracked for it.
    pub fn new<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.param(t.shape(), t.data())
                } else {
                    tape.constant(t.shape(), t.data().to_vec())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} not bound")))
    }

    /// Adds tape gradients into the tensors' accumulators.
    pub fn collect_grads<T: Real>(&self, tape: &Tape<T>, params: &mut ParamSet<T>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = params.get_mut(name)?;
            if t.requires_grad() {
                t.accumulate_grad(&tape.grad(*var))?;
            }
        }
        Ok(())
    }
}
