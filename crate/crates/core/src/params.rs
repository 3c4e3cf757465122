//! Named parameter storage and the slot mechanism shared by every layer.
//!
//! Layers describe their parameters once, through a `build` constructor
//! that hands a [`ParamSlot`] (name, shape, fan-in) to a closure. The same
//! constructor initializes tensors into a [`ParamStore`] and, later, looks
//! up the corresponding graph variables, so names cannot drift apart.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

impl ParamSlot {
    /// Kaiming-uniform (ReLU gain) weights, zero biases.
    pub fn init<T: Float, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        if self.is_bias {
            return Tensor::zeros(self.shape.clone());
        }
        let bound = (6.0 / self.fan_in as f64).sqrt();
        Tensor::from_fn(self.shape.clone(), |_| T::of(rng.random_range(-bound..bound)))
    }
}

/// Ordered name → tensor map. Iteration order is insertion order, which
/// keeps checkpoints and optimizer state deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Float = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
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

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Places every tensor in `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph variables for a [`ParamStore`], by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Pairs names with existing variables (e.g. the inputs of a gradient
    /// check).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("no parameter named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients from the last backward pass. Parameters the loss did not
    /// reach get explicit zeros.
    pub fn grads<T: Float>(&self, g: &Graph<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            let grad = g
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()));
            out.insert(name.clone(), grad);
        }
        out
    }
}

/// Weight and bias of a 2-D convolution.
#[derive(Clone, Debug)]
pub struct ConvParams<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> ConvParams<P> {
    pub fn build(
        prefix: &str,
        cout: usize,
        cin: usize,
        k: usize,
        make: &mut impl FnMut(ParamSlot) -> Result<P>,
    ) -> Result<Self> {
        Ok(ConvParams {
            weight: make(ParamSlot {
                name: format!("{prefix}.weight"),
                shape: vec![cout, cin, k, k],
                fan_in: cin * k * k,
                is_bias: false,
            })?,
            bias: make(ParamSlot {
                name: format!("{prefix}.bias"),
                shape: vec![cout],
                fan_in: cin * k * k,
                is_bias: true,
            })?,
        })
    }
}
