//! Named weight collections and their binding into autodiff graphs.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use uqgan_autograd::{Array, Gradients, Tensor};

/// Ordered, uniquely named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedArrays {
    entries: Vec<(String, Array)>,
}

impl NamedArrays {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, array: Array) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate parameter name `{name}`");
        self.entries.push((name, array));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Array> {
        self.entries.iter_mut().map(|(_, a)| a)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.all_finite())
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Graph leaves for every array: trainable leaves collect gradients, others are constants.
    pub fn bind(&self, trainable: bool) -> BoundParams {
        let tensors = self
            .entries
            .iter()
            .map(|(_, a)| {
                if trainable {
                    Tensor::param(a.clone())
                } else {
                    Tensor::constant(a.clone())
                }
            })
            .collect();
        BoundParams {
            index: self
                .entries
                .iter()
                .enumerate()
                .map(|(i, (n, _))| (n.clone(), i))
                .collect(),
            tensors,
        }
    }
}

/// Graph leaves bound from a [`NamedArrays`], in the same order.
pub struct BoundParams {
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> &Tensor {
        let i = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"));
        &self.tensors[*i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Per-parameter gradients in binding order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Array>> {
        self.tensors.iter().map(|t| grads.get(t).cloned()).collect()
    }

    /// Euclidean norm of all gradients reaching these leaves.
    pub fn gradient_norm(&self, grads: &Gradients) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| grads.get(t))
            .map(Array::sq_norm)
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn normal_array(shape: &[usize], std: f64, rng: &mut impl Rng) -> Array {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

pub(crate) fn unit_vector(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, 1.0).expect("unit std");
    loop {
        let v: Vec<f64> = (0..len).map(|_| dist.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
