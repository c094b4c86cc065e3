use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::{cast, Scalar};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, T::one()))
    }

    /// Normal initialization with standard deviation `std`.
    pub fn normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                cast(z * std)
            })
            .collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone(), requires_grad)).collect(),
        }
    }

    /// Copy converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Per-parameter zero tensors, the accumulator shape for gradients.
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|v| Tensor::zeros(v.shape())).collect()
    }
}

/// Parameters placed on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of every bound parameter, zeros where no gradient flowed.
    pub fn collect<T: Scalar>(&self, tape: &Tape<T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}

/// Sums per-sample gradient lists in order.
pub fn sum_grads<T: Scalar>(parts: impl IntoIterator<Item = Vec<Tensor<T>>>) -> Option<Vec<Tensor<T>>> {
    let mut it = parts.into_iter();
    let mut acc = it.next()?;
    for g in it {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    Some(acc)
}
