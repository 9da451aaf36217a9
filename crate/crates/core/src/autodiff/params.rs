//! Named parameter collections and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named tensors with unique names, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Insert-or-overwrite.
    pub fn set(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros_like(v)))
                .collect(),
        }
    }

    /// `self += scale * other` entry by entry; names must match.
    pub fn axpy(&mut self, scale: T, other: &ParamSet<T>) -> Result<()> {
        for (name, v) in other.iter() {
            self.get_mut(name)?.axpy(scale, v)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every entry as a leaf on `graph`.
    pub fn bind(&self, graph: &Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
                .collect(),
        }
    }

    /// Registers every entry as a constant on `graph`.
    pub fn bind_constant(&self, graph: &Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
                .collect(),
        }
    }

    /// He-normal init for a conv kernel `[k,k,cin,cout]` plus a zero bias.
    pub fn init_conv(
        &mut self,
        prefix: &str,
        k: usize,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        self.insert(format!("{prefix}.w"), normal([k, k, cin, cout], std, rng))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros([cout]))
    }

    pub fn init_conv_zero(&mut self, prefix: &str, k: usize, cin: usize, cout: usize) -> Result<()> {
        self.insert(format!("{prefix}.w"), Tensor::zeros([k, k, cin, cout]))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros([cout]))
    }

    /// Dense layer `[cin,cout]` with `N(0, gain²/cin)` weights and zero bias.
    pub fn init_linear(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let std = gain / (cin as f64).sqrt();
        self.insert(format!("{prefix}.w"), normal([cin, cout], std, rng))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros([cout]))
    }
}

pub(crate) fn normal<T: Scalar>(
    shape: impl Into<Vec<usize>>,
    std: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    Tensor::from_fn(shape, |_| T::c(dist.sample(rng)))
}

/// Parameter names bound to [`Var`]s on one particular graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new() -> Self {
        Bound::default()
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn subset(&self, prefix: &str) -> Bound {
        Bound {
            vars: self
                .vars
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, &v)| (k.clone(), v))
                .collect(),
        }
    }

    /// Gradients of every bound name; names the sweep did not reach get zeros.
    pub fn collect<T: Scalar>(&self, graph: &Graph<T>, grads: &Gradients<T>) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, &var) in &self.vars {
            let g = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.shape(var)));
            out.set(name.clone(), g);
        }
        out
    }
}
