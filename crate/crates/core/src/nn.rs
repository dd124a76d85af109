//! Parameterized building blocks shared by every stack: linear maps, layer
//! norms, feed-forward sub-blocks and multi-head attention projections.
//! Parameters live in a [`ParamStore`] under dotted names.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{linear_weight, ParamStore};
use crate::tensor::{Activation, Tensor};

pub(crate) fn join(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

pub(crate) fn init_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) {
    store.insert(join(name, "w"), linear_weight(fan_in, fan_out, rng));
    if bias {
        store.insert(join(name, "b"), Tensor::zeros(vec![fan_out]));
    }
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &join(name, "w"))?;
    let y = g.matmul(x, w)?;
    let bias = join(name, "b");
    if store.contains(&bias) {
        let b = g.param(store, &bias)?;
        g.add_row(y, b)
    } else {
        Ok(y)
    }
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(join(name, "scale"), Tensor::full(vec![d], 1.0));
    store.insert(join(name, "offset"), Tensor::zeros(vec![d]));
}

pub(crate) fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let s = g.param(store, &join(name, "scale"))?;
    let o = g.param(store, &join(name, "offset"))?;
    g.layer_norm(x, s, o)
}

/// Two-layer MLP `W2 · act(W1 · x + b1) + b2`.
pub(crate) fn init_ffw(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, hidden: usize) {
    init_linear(store, rng, &join(name, "fc1"), d, hidden, true);
    init_linear(store, rng, &join(name, "fc2"), hidden, d, true);
}

pub(crate) fn ffw(g: &mut Graph, store: &ParamStore, name: &str, x: Var, act: Activation) -> Result<Var> {
    let h = linear(g, store, &join(name, "fc1"), x)?;
    let h = g.activation(h, act);
    linear(g, store, &join(name, "fc2"), h)
}

/// Bias-free query/key/value/output projections.
pub(crate) fn init_attention(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) {
    for p in ["wq", "wk", "wv", "wo"] {
        init_linear(store, rng, &join(name, p), d, d, false);
    }
}

/// Projected multi-head attention over already-normalized inputs.
/// `blocks > 1` gives block-diagonal attention (see [`Graph::attention_blocks`]).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    blocks: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let q = linear(g, store, &join(name, "wq"), q_in)?;
    let k = linear(g, store, &join(name, "wk"), kv_in)?;
    let v = linear(g, store, &join(name, "wv"), kv_in)?;
    let a = g.attention_blocks(q, k, v, heads, blocks, mask)?;
    linear(g, store, &join(name, "wo"), a)
}
