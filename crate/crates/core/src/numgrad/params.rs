use rand::Rng;

use super::tensor::Tensor;
use super::value::Value;
use crate::error::{Error, Result};

/// Handle to a tensor held by a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, persistent learnable tensors.
///
/// Graphs never own parameters: each step calls [`ParamStore::bind`] to get
/// fresh gradient-tracking leaves, runs forward/backward, then hands the
/// bound leaves to [`Sgd::step`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn bind(&self) -> BoundParams {
        BoundParams {
            leaves: self.tensors.iter().cloned().map(Value::param).collect(),
        }
    }

    /// Like [`ParamStore::bind`] but with gradients disabled.
    pub fn bind_frozen(&self) -> BoundParams {
        BoundParams {
            leaves: self.tensors.iter().cloned().map(Value::constant).collect(),
        }
    }
}

/// Graph leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    leaves: Vec<Value>,
}

impl BoundParams {
    pub fn get(&self, id: ParamId) -> &Value {
        &self.leaves[id.0]
    }

    /// Substitutes the leaf for `id`, e.g. to differentiate with respect to
    /// one parameter in isolation.
    pub fn replace(&mut self, id: ParamId, leaf: Value) {
        self.leaves[id.0] = leaf;
    }

    pub fn zero_grad(&self) {
        self.leaves.iter().for_each(Value::zero_grad);
    }
}

/// Plain stochastic gradient descent.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore, bound: &BoundParams) {
        for (tensor, leaf) in store.tensors.iter_mut().zip(&bound.leaves) {
            if let Some(g) = leaf.grad() {
                tensor
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(w, gi)| *w -= self.lr * gi);
            }
        }
    }
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-limit..=limit))
}

/// Affine map `x * W + b` applied to the rows of `x`.
#[derive(Debug, Clone, Copy)]
pub struct LinearMap {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearMap {
    /// Registers a Glorot-initialised weight and, if requested, a zero bias.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(name, glorot_uniform(rng, in_dim, out_dim));
        let bias = with_bias.then(|| store.add(format!("{name}_bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Wraps tensors already in the store, checking their shapes agree.
    pub fn from_store(store: &ParamStore, weight: ParamId, bias: Option<ParamId>) -> Result<Self> {
        let (in_dim, out_dim) = store.get(weight).matrix_dims().ok_or_else(|| {
            Error::shape(
                "linear",
                format!(
                    "weight `{}` must be a matrix, got {:?}",
                    store.name(weight),
                    store.get(weight).shape()
                ),
            )
        })?;
        if let Some(b) = bias {
            if store.get(b).shape() != [out_dim] {
                return Err(Error::shape(
                    "linear",
                    format!(
                        "bias `{}` has shape {:?}, weight has {out_dim} columns",
                        store.name(b),
                        store.get(b).shape()
                    ),
                ));
            }
        }
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, x: &Value, params: &BoundParams) -> Result<Value> {
        let y = x.matmul(params.get(self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(params.get(b)),
            None => Ok(y),
        }
    }
}
