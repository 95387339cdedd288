//! Named storage for learnable tensors. Tapes reference parameters by id,
//! backward passes produce a `Gradients` bundle, and the store folds those
//! bundles into each tensor's accumulator before the optimizer step.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Folds a gradient bundle into the per-tensor accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.by_param.iter().enumerate() {
            if let Some(g) = g {
                self.tensors[i].accumulate_grad(g);
            }
        }
    }
}

/// Per-parameter gradient vectors produced by one backward pass. Workers
/// running independent tapes merge their bundles in a fixed order so that
/// training stays bit-reproducible.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn empty(param_count: usize) -> Self {
        Self {
            by_param: vec![None; param_count],
        }
    }

    pub(crate) fn add_to(&mut self, id: ParamId, grad: &[f64]) {
        let slot = &mut self.by_param[id.0];
        match slot {
            Some(acc) => {
                for (dst, src) in acc.iter_mut().zip(grad) {
                    *dst += src;
                }
            }
            None => *slot = Some(grad.to_vec()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(id.0).and_then(|g| g.as_deref())
    }

    /// Sums another bundle into this one.
    pub fn merge(&mut self, other: &Gradients) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (i, g) in other.by_param.iter().enumerate() {
            if let Some(g) = g {
                self.add_to(ParamId(i), g);
            }
        }
    }
}
