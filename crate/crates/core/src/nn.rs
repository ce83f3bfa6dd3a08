//! Parameter storage and the small set of layers the models are built from.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Which learning rate a parameter follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    Transformer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: Group,
    /// Whether weight decay applies. Off for norm gains/biases and embeddings.
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names are unique paths such as
    /// `encoder.0.attn.q.w`.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: Group, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            group,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { tape, vars }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps variables recorded elsewhere, one per parameter in store order.
    pub fn from_vars(store: &ParamStore, tape: &'t Tape, vars: Vec<Var<'t>>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::dim("bind", format!("{} variables for {} parameters", vars.len(), store.len())));
        }
        for (v, p) in vars.iter().zip(&store.params) {
            if v.shape() != p.value.shape() {
                return Err(Error::dim("bind", format!("{} expects {:?}, got {:?}", p.name, p.value.shape(), v.shape())));
            }
        }
        Ok(Bound { tape, vars })
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradient of every parameter after backward; `None` where nothing
    /// flowed into it.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}

/// Helper for building named parameters under a common prefix.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub group: Group,
    prefix: String,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, group: Group) -> Self {
        Self {
            store,
            rng,
            group,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `segment` appended to the name prefix.
    pub fn scope<T>(&mut self, segment: impl std::fmt::Display, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() {
            segment.to_string()
        } else {
            format!("{saved}.{segment}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f32, decay: bool) -> ParamId {
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| rng::normal(rng) * std);
        let name = self.name(leaf);
        self.store.add(name, value, self.group, decay)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f32, decay: bool) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, Tensor::full(shape, value), self.group, decay)
    }
}

/// Token-major affine map `x·W + b` for x of shape T×in.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        init.scope(name, |init| Linear {
            w: init.normal("w", &[fan_in, fan_out], (1.0 / fan_in as f32).sqrt(), true),
            b: init.constant("b", &[fan_out], 0.0, false),
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.w))?.add(p.get(self.b))
    }
}

/// Layer normalization over the last axis of a T×C matrix.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, width: usize) -> Self {
        init.scope(name, |init| LayerNorm {
            gamma: init.constant("gamma", &[width], 1.0, false),
            beta: init.constant("beta", &[width], 0.0, false),
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let axis = x.shape().len() - 1;
        x.layernorm(axis, p.get(self.gamma), p.get(self.beta))
    }
}

/// Position-wise two-layer ReLU network.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, width: usize, hidden: usize) -> Self {
        init.scope(name, |init| FeedForward {
            up: Linear::new(init, "up", width, hidden),
            down: Linear::new(init, "down", hidden, width),
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.up.forward(p, x)?.relu();
        self.down.forward(p, h)
    }
}
