use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Accumulated gradients, keyed by parameter and by non-parameter leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S = f32> {
    params: Vec<Option<Tensor<S>>>,
    leaves: HashMap<usize, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            leaves: HashMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf created with `requires_grad` in the graph that
    /// produced these gradients.
    pub fn leaf(&self, var: crate::graph::Var) -> Option<&Tensor<S>> {
        self.leaves.get(&var.index())
    }

    pub(crate) fn accumulate_param(&mut self, id: ParamId, shape: &[usize], grad: &[S]) {
        if self.params.len() <= id.0 {
            self.params.resize_with(id.0 + 1, || None);
        }
        let slot = self.params[id.0].get_or_insert_with(|| Tensor::zeros(shape));
        for (a, g) in slot.data_mut().iter_mut().zip(grad) {
            *a += *g;
        }
    }

    pub(crate) fn accumulate_leaf(&mut self, index: usize, shape: &[usize], grad: &[S]) {
        let slot = self.leaves.entry(index).or_insert_with(|| Tensor::zeros(shape));
        for (a, g) in slot.data_mut().iter_mut().zip(grad) {
            *a += *g;
        }
    }

    pub fn clear(&mut self) {
        self.params.clear();
        self.leaves.clear();
    }

    pub fn global_norm(&self) -> S {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|g| *g * *g)
            .sum::<S>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        for t in self.params.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(Tensor::all_finite)
    }
}
