use std::collections::HashMap;

use rand::Rng;

use crate::tape::Var;
use crate::{NumError, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumError::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }
}

/// Gradients produced by a backward pass.
///
/// Parameter gradients accumulate across calls so that a batch can be
/// summed sample by sample; leaf gradients are replaced on every pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Gradients {
            params: vec![None; store.len()],
            leaves: HashMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn leaf(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub(crate) fn ensure_len(&mut self, n: usize) {
        if self.params.len() < n {
            self.params.resize(n, None);
        }
    }

    pub(crate) fn accumulate_param(&mut self, id: ParamId, shape: &[usize], grad: &[f64], scale: f64) {
        let slot = self.params[id.0].get_or_insert_with(|| Tensor::zeros(shape));
        for (s, g) in slot.data_mut().iter_mut().zip(grad) {
            *s += scale * g;
        }
    }

    pub(crate) fn set_leaf(&mut self, var: Var, grad: Tensor) {
        self.leaves.insert(var, grad);
    }

    /// Sum of squared parameter-gradient entries.
    pub fn squared_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|g| g * g)
            .sum()
    }

    /// Rescales parameter gradients so their global L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.squared_norm().sqrt();
        if norm > max_norm && norm > 0.0 {
            let c = max_norm / norm;
            for t in self.params.iter_mut().flatten() {
                t.data_mut().iter_mut().for_each(|g| *g *= c);
            }
        }
        norm
    }
}

/// Uniform initialization in `[-range, range)`.
pub fn uniform<R: Rng + ?Sized>(shape: &[usize], range: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-range..range)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product agree")
}
