//! Named parameter storage and per-graph binding.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape("set_param", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<S>) -> Bound {
        Bound(self.values.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Gradients of every parameter in id order; zero when absent.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<S>) -> Result<Vec<Tensor<S>>> {
        self.values
            .iter()
            .zip(&bound.0)
            .map(|(t, &v)| match grads.take(v) {
                Some(gr) => Ok(gr),
                None => Tensor::zeros(t.shape().to_vec()),
            })
            .collect()
    }

    /// Same parameters converted to another scalar type.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Same names and shapes in the same order.
    pub fn check_schema(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count differs: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (i, (n, t)) in self.iter().enumerate() {
            let (on, ot) = (&other.names[i], &other.values[i]);
            if n != on || t.shape() != ot.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {n} {:?} does not match {on} {:?}",
                    t.shape(),
                    ot.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Graph leaves for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps leaves created in store order.
    pub fn new(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Glorot-uniform matrix.
pub fn xavier<S: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Tensor<S>> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new([rows, cols], (0..rows * cols).map(|_| S::lit(rng.random_range(-a..a))).collect())
}

pub fn normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Tensor<S>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| S::lit(dist.sample(rng))).collect())
}
