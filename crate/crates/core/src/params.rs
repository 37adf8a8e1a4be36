//! Named parameter storage and its binding onto a differentiation tape.

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Tensor, Var};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Integrity(format!("duplicate parameter {name}")));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    /// Normal(0, std) entries from `rng`.
    pub(crate) fn insert_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut SplitMix64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.normal() * std)).collect();
        self.insert(name, Tensor::raw(shape, data))
            .expect("unique parameter name");
    }

    pub(crate) fn insert_ones(&mut self, name: &str, d: usize) {
        self.insert(name, Tensor::full(vec![1, d], T::one()))
            .expect("unique parameter name");
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            names: self.names.clone(),
            vars,
        }
    }

    /// Gradients of every parameter, zeros where none flowed.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }
}

/// Parameters placed on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    /// Pairs names with variables already on a tape.
    pub fn from_vars(names: Vec<String>, vars: Vec<Var>) -> Self {
        assert_eq!(names.len(), vars.len(), "one variable per name");
        Self { names, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Integrity(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
