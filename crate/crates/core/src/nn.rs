//! Parameterized layers shared by the detector modules.

use std::cell::RefCell;
use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{normal, xavier_uniform, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

/// Forward-pass context: the tape being recorded and the weights it reads.
/// Each parameter is placed on the tape at most once per context.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
    cache: RefCell<HashMap<ParamId, Var<'t>>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self {
            tape,
            store,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        *self
            .cache
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| self.tape.param(self.store, id))
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}

/// Parameter factory used while building a model.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub group: ParamGroup,
}

impl Init<'_> {
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let t = xavier_uniform(self.rng, shape.to_vec(), fan_in, fan_out);
        self.store.add(name, t, self.group)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape.to_vec()), self.group)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape.to_vec()), self.group)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = normal(self.rng, shape.to_vec(), std);
        self.store.add(name, t, self.group)
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(name, value, self.group)
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: init.xavier(&format!("{name}.weight"), &[in_dim, out_dim], in_dim, out_dim),
            bias: init.zeros(&format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn zeroed(init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: init.zeros(&format!("{name}.weight"), &[in_dim, out_dim]),
            bias: init.zeros(&format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(ctx.param(self.weight))?.add(ctx.param(self.bias))
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.ones(&format!("{name}.gamma"), &[dim]),
            beta: init.zeros(&format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let axis = x.value().ndim() - 1;
        x.layer_norm(ctx.param(self.gamma), ctx.param(self.beta), axis)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(init, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if i != last {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

/// Scaled dot-product multi-head attention over a set of tokens.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::contract(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            out: Linear::new(init, &format!("{name}.out"), dim, dim),
            heads,
        })
    }

    /// `query`/`key`: `[N, d]` and `[S, d]`; `value`: `[S, d]`. Returns `[N, d]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, query: Var<'t>, key: Var<'t>, value: Var<'t>) -> Result<Var<'t>> {
        let (n, d) = (query.shape()[0], query.shape()[1]);
        let s = key.shape()[0];
        let dh = d / self.heads;
        let split = |x: Var<'t>, len: usize| x.reshape(&[len, self.heads, dh])?.permute(&[1, 0, 2]);
        let q = split(self.q.forward(ctx, query)?, n)?;
        let k = split(self.k.forward(ctx, key)?, s)?;
        let v = split(self.v.forward(ctx, value)?, s)?;
        let scores = q
            .matmul(k.permute(&[0, 2, 1])?)?
            .scale(1.0 / (dh as f64).sqrt())
            .softmax(2)?;
        let mixed = scores.matmul(v)?.permute(&[1, 0, 2])?.reshape(&[n, d])?;
        self.out.forward(ctx, mixed)
    }
}
