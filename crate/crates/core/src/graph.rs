//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op evaluates eagerly and appends a node to the tape. Nodes whose
//! inputs are all constants are recorded without a backward rule, so frozen
//! sub-networks cost nothing in the backward pass. `backward` walks the tape
//! once in reverse insertion order (a valid reverse topological order).

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{
    gemm, layer_norm_forward, masked_softmax_rows, Activation, MatMut, MatRef, Tensor,
};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale(Var, f64),
    ScaleBy { a: Var, s: Var },
    Tanh(Var),
    Exp(Var),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        scale: Var,
        offset: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax { x: Var },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: usize,
        probs: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    ReplaceRow { base: Var, row: Var, index: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    L2Normalize { a: Var, inv_norm: Vec<f64> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Single writer; independent graphs may be built
/// concurrently over shared read-only parameters.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    no_grad: bool,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node that required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter entered into the graph.
    /// Parameters unreachable from the loss appear with a zero gradient.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inference graph: every parameter enters as a constant and no backward
    /// caches are kept.
    pub fn no_grad() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that receives a gradient (retrievable with [`Gradients::wrt`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Enters a named parameter. Frozen parameters become constants. Repeated
    /// calls with the same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = if self.no_grad || store.is_frozen(name) {
            self.constant(value)
        } else {
            let v = self.input(value);
            self.params.insert(name.to_string(), v);
            v
        };
        Ok(v)
    }

    /// `a · b` on matrix views.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` on matrix views.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = crate::tensor::matmul_t(self.value(a), self.value(b), trans_b)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[cols]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.len() != c {
            return Err(shape_err("add_row", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow { a, bias }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Multiplies `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let out = self.value(a).map(|v| v * sv);
        Ok(self.push(out, Op::ScaleBy { a, s }, &[a, s]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = self.value(a).map(|v| kind.apply(v));
        self.push(out, Op::Act(a, kind), &[a])
    }

    /// Layer normalization over the last dimension with affine `scale`/`offset`.
    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if d == 0 {
            return Err(invalid("layer_norm over an empty dimension"));
        }
        let (ts, to) = (self.value(scale), self.value(offset));
        if ts.len() != d || to.len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, scale {:?}, offset {:?}", tx.shape(), ts.shape(), to.shape()),
            ));
        }
        let (out, xhat, inv_std) = layer_norm_forward(tx.data(), d, ts.data(), to.data());
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                scale,
                offset,
                xhat,
                inv_std,
            },
            &[x, scale, offset],
        ))
    }

    /// Row-wise softmax over admissible entries; all-inadmissible rows are zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let out = crate::tensor::masked_softmax(self.value(x), mask)?;
        Ok(self.push(out, Op::MaskedSoftmax { x }, &[x]))
    }

    /// Multi-head scaled dot-product attention. `q: [Lq, d]`, `k, v: [Lk, d]`.
    /// `mask`, when given, is a row-major `[Lq, Lk]` admissibility matrix
    /// shared by all heads; a query row with no admissible key yields zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        self.attention_blocks(q, k, v, heads, 1, mask)
    }

    /// Block-diagonal attention: queries and keys are split into `blocks`
    /// equal consecutive groups and group `b` of the queries attends only to
    /// group `b` of the keys. `mask`, if present, is either one
    /// `[Lq/blocks, Lk/blocks]` matrix shared by every block or `blocks` such
    /// matrices stacked in block order. Each block is computed exactly as a
    /// standalone call would compute it.
    pub fn attention_blocks(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if blocks == 0 || tq.rows() % blocks != 0 || tk.rows() % blocks != 0 {
            return Err(shape_err(
                "attention",
                format!("{blocks} blocks for {} queries / {} keys", tq.rows(), tk.rows()),
            ));
        }
        let lq = tq.rows() / blocks;
        let lk = tk.rows() / blocks;
        if tk.cols() != d || tv.cols() != d || tv.rows() != tk.rows() {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(invalid(format!("{heads} heads do not divide width {d}")));
        }
        if let Some(m) = mask {
            if m.len() != lq * lk && m.len() != blocks * lq * lk {
                return Err(shape_err(
                    "attention",
                    format!("mask of {} entries for [{lq}, {lk}] scores", m.len()),
                ));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let per = lq * lk;
        let mut probs = vec![0.0; blocks * heads * per];
        let mut scores = vec![0.0; per];
        let mut out = vec![0.0; blocks * lq * d];
        for b in 0..blocks {
            let (qo, ko) = (b * lq * d, b * lk * d);
            let block_mask = mask.map(|m| if m.len() == per { m } else { &m[b * per..(b + 1) * per] });
            for h in 0..heads {
                let qh = MatRef { data: tq.data(), offset: qo + h * dh, rs: d, cs: 1 };
                let kh = MatRef { data: tk.data(), offset: ko + h * dh, rs: d, cs: 1 };
                let vh = MatRef { data: tv.data(), offset: ko + h * dh, rs: d, cs: 1 };
                gemm(lq, dh, lk, scale, qh, kh.t(), 0.0, MatMut { data: &mut scores, offset: 0, rs: lk, cs: 1 });
                let ph = &mut probs[(b * heads + h) * per..(b * heads + h + 1) * per];
                masked_softmax_rows(&scores, block_mask, lk, ph);
                gemm(
                    lq,
                    lk,
                    dh,
                    1.0,
                    MatRef::rowmajor(ph, lk),
                    vh,
                    0.0,
                    MatMut { data: &mut out, offset: qo + h * dh, rs: d, cs: 1 },
                );
            }
        }
        let out = Tensor::new(vec![blocks * lq, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, blocks, probs }, &[q, k, v]))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(Error::TokenOutOfRange { id, vocab: n });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Copy of `base` with row `index` replaced by the single row in `row`.
    pub fn replace_row(&mut self, base: Var, index: usize, row: Var) -> Result<Var> {
        let (tb, tr) = (self.value(base), self.value(row));
        let c = tb.cols();
        if tr.len() != c || index >= tb.rows() {
            return Err(shape_err(
                "replace_row",
                format!("base {:?}, row {:?}, index {index}", tb.shape(), tr.shape()),
            ));
        }
        let mut data = tb.data().to_vec();
        data[index * c..(index + 1) * c].copy_from_slice(tr.data());
        let out = Tensor::new(tb.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ReplaceRow { base, row, index }, &[base, row]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::concat_rows(&tensors)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, end)?;
        Ok(self.push(out, Op::SliceRows { a, start }, &[a]))
    }

    /// Mean over rows: `[n, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c) = (t.rows(), t.cols());
        if n == 0 {
            return Err(Error::Empty("mean_rows input"));
        }
        let mut acc = vec![0.0; c];
        for r in 0..n {
            for (s, v) in acc.iter_mut().zip(t.row(r)) {
                *s += v;
            }
        }
        acc.iter_mut().for_each(|s| *s /= n as f64);
        let out = Tensor::new(vec![1, c], acc)?;
        Ok(self.push(out, Op::MeanRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Scales every row to unit L2 norm: `x / sqrt(‖x‖² + 1e-24)`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols().max(1);
        let mut data = t.data().to_vec();
        let mut inv_norm = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c) {
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norm.push(inv);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::L2Normalize { a, inv_norm }, &[a])
    }

    /// Weighted softmax cross-entropy summed over rows:
    /// `Σ_r w_r · (−Σ_c q_rc · log softmax(logits_r)_c)` with label-smoothed
    /// targets `q = (1−s)·onehot + s/C`. Rows with zero weight are skipped.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        smoothing: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = (t.rows(), t.cols());
        if targets.len() != n || weights.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{n} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(invalid(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for r in 0..n {
            if weights[r] == 0.0 {
                continue;
            }
            if targets[r] >= c {
                return Err(Error::TokenOutOfRange { id: targets[r], vocab: c });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            let mut loss = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let q = smoothing / c as f64 + if j == targets[r] { 1.0 - smoothing } else { 0.0 };
                loss -= q * (z - lse);
                probs[r * c + j] = (z - lse).exp();
            }
            total += weights[r] * loss;
        }
        let out = Tensor::scalar(total);
        out.ensure_finite("cross_entropy")?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing,
                probs,
            },
            &[logits],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Reverse pass from a single-valued `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        lv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            out.push(match g {
                Some(g) if node.requires_grad => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                _ => None,
            });
        }
        let mut params = BTreeMap::new();
        for (name, &v) in &self.params {
            let g = out[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape().to_vec()));
            g.ensure_finite("backward")?;
            params.insert(name.clone(), g);
        }
        Ok(Gradients { grads: out, params })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let len_of = |v: Var| self.nodes[v.0].value.len();
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = node.value.cols();
                let gref = MatRef::rowmajor(g, n);
                if needs(*a) {
                    // dA = G · Bᵀ (or G · B when B entered transposed)
                    let bref = MatRef::rowmajor(tb.data(), tb.cols());
                    let dst = acc(grads, *a, len_of(*a));
                    gemm(m, n, k, 1.0, gref, if *trans_b { bref } else { bref.t() }, 1.0,
                        MatMut { data: dst, offset: 0, rs: k, cs: 1 });
                }
                if needs(*b) {
                    let aref = MatRef::rowmajor(ta.data(), k);
                    let dst = acc(grads, *b, len_of(*b));
                    if *trans_b {
                        // B is [n, k]: dB = Gᵀ · A
                        gemm(n, m, k, 1.0, gref.t(), aref, 1.0, MatMut { data: dst, offset: 0, rs: k, cs: 1 });
                    } else {
                        // B is [k, n]: dB = Aᵀ · G
                        gemm(k, m, n, 1.0, aref.t(), gref, 1.0, MatMut { data: dst, offset: 0, rs: n, cs: 1 });
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc(grads, v, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if needs(*b) {
                    acc(grads, *b, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let dst = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * tb.data()[i];
                    }
                }
                if needs(*b) {
                    let dst = acc(grads, *b, g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * ta.data()[i];
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if needs(*a) {
                    acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if needs(*bias) {
                    let c = len_of(*bias);
                    let dst = acc(grads, *bias, c);
                    for row in g.chunks(c.max(1)) {
                        dst.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::ScaleBy { a, s } => {
                let sv = self.value(*s).data()[0];
                if needs(*a) {
                    acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += sv * x);
                }
                if needs(*s) {
                    let dot: f64 = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    acc(grads, *s, 1)[0] += dot;
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let dst = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let dst = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * y[i];
                    }
                }
            }
            Op::Act(a, kind) => {
                if needs(*a) {
                    let x = self.value(*a).data();
                    let dst = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * kind.derivative(x[i]);
                    }
                }
            }
            Op::LayerNorm { x, scale, offset, xhat, inv_std } => {
                let d = node.value.cols();
                let sc = self.value(*scale).data();
                if needs(*scale) {
                    let dst = acc(grads, *scale, d);
                    for (r, row) in g.chunks(d).enumerate() {
                        for c in 0..d {
                            dst[c] += row[c] * xhat[r * d + c];
                        }
                    }
                }
                if needs(*offset) {
                    let dst = acc(grads, *offset, d);
                    for row in g.chunks(d) {
                        dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if needs(*x) {
                    let dst = acc(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, row) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            dxhat[c] = row[c] * sc[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xh[c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for c in 0..d {
                            dst[r * d + c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                if needs(*x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let dst = acc(grads, *x, g.len());
                    for r in 0..node.value.rows() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dst[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, blocks, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, *blocks, probs, grads);
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let c = node.value.cols();
                    let dst = acc(grads, *table, len_of(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dst[id * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::ReplaceRow { base, row, index } => {
                let c = node.value.cols();
                if needs(*base) {
                    let dst = acc(grads, *base, g.len());
                    for (i, (d, x)) in dst.iter_mut().zip(g).enumerate() {
                        if i / c != *index {
                            *d += x;
                        }
                    }
                }
                if needs(*row) {
                    let dst = acc(grads, *row, c);
                    dst.iter_mut()
                        .zip(&g[index * c..(index + 1) * c])
                        .for_each(|(d, x)| *d += x);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = len_of(p);
                    if needs(p) {
                        acc(grads, p, n).iter_mut().zip(&g[off..off + n]).for_each(|(d, x)| *d += x);
                    }
                    off += n;
                }
            }
            Op::SliceRows { a, start } => {
                if needs(*a) {
                    let c = node.value.cols();
                    let dst = acc(grads, *a, len_of(*a));
                    dst[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x);
                }
            }
            Op::MeanRows(a) => {
                if needs(*a) {
                    let n = self.value(*a).rows() as f64;
                    let c = g.len();
                    let dst = acc(grads, *a, len_of(*a));
                    for row in dst.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(d, x)| *d += x / n);
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    acc(grads, *a, len_of(*a)).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::L2Normalize { a, inv_norm } => {
                if needs(*a) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let dst = acc(grads, *a, g.len());
                    for (r, &inv) in inv_norm.iter().enumerate() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dst[r * c + j] += inv * (gr[j] - yr[j] * dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, smoothing, probs } => {
                if needs(*logits) {
                    let c = self.value(*logits).cols();
                    let dst = acc(grads, *logits, probs.len());
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let q = smoothing / c as f64
                                + if j == targets[r] { 1.0 - smoothing } else { 0.0 };
                            dst[r * c + j] += g[0] * w * (probs[r * c + j] - q);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let (lq, lk) = (tq.rows() / blocks, tk.rows() / blocks);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let per = lq * lk;
        let mut dq = vec![0.0; tq.len()];
        let mut dk = vec![0.0; tk.len()];
        let mut dv = vec![0.0; tv.len()];
        let mut dp = vec![0.0; per];
        for b in 0..blocks {
            let (qo, ko) = (b * lq * d, b * lk * d);
            for h in 0..heads {
                let p = &probs[(b * heads + h) * per..(b * heads + h + 1) * per];
                let gh = MatRef { data: g, offset: qo + h * dh, rs: d, cs: 1 };
                let qh = MatRef { data: tq.data(), offset: qo + h * dh, rs: d, cs: 1 };
                let kh = MatRef { data: tk.data(), offset: ko + h * dh, rs: d, cs: 1 };
                let vh = MatRef { data: tv.data(), offset: ko + h * dh, rs: d, cs: 1 };
                let pref = MatRef::rowmajor(p, lk);
                // dV_h = Pᵀ · G_h
                gemm(lk, lq, dh, 1.0, pref.t(), gh, 1.0, MatMut { data: &mut dv, offset: ko + h * dh, rs: d, cs: 1 });
                // dP = G_h · V_hᵀ
                gemm(lq, dh, lk, 1.0, gh, vh.t(), 0.0, MatMut { data: &mut dp, offset: 0, rs: lk, cs: 1 });
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for r in 0..lq {
                    let (pr, dr) = (&p[r * lk..(r + 1) * lk], &mut dp[r * lk..(r + 1) * lk]);
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..lk {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                let ds = MatRef::rowmajor(&dp, lk);
                gemm(lq, lk, dh, scale, ds, kh, 1.0, MatMut { data: &mut dq, offset: qo + h * dh, rs: d, cs: 1 });
                gemm(lk, lq, dh, scale, ds.t(), qh, 1.0, MatMut { data: &mut dk, offset: ko + h * dh, rs: d, cs: 1 });
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                let dst = grads[var.0].get_or_insert_with(|| vec![0.0; delta.len()]);
                dst.iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Shared, immutable boolean mask.
pub type Mask = Arc<Vec<bool>>;

/// Row-major `[len, len]` causal admissibility (`j ≤ i`).
pub fn causal_mask(len: usize) -> Vec<bool> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            m[i * len + j] = true;
        }
    }
    m
}
