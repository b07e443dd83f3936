use std::borrow::Cow;
use std::cell::{Cell, Ref, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{self, dot};
use super::{flops, shape_err, ParamStore, Result, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Visibility mask for attention: `rows` queries over `cols` keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AttnMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    /// `n` new queries appended after `prefix` cached keys, causal over the new block.
    pub fn causal(prefix: usize, n: usize) -> Self {
        Self::from_fn(n, prefix + n, |i, j| j <= prefix + i)
    }

    /// Query `i` sees keys `0..i` only (empty for the first query).
    pub fn strictly_before(n: usize, m: usize) -> Self {
        Self::from_fn(n, m, |i, j| j < i)
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, p: usize },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Var, Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Rc<Vec<f64>>, mask: Rc<AttnMask> },
    SoftmaxRows { x: Var, temperature: f64 },
    Sum(Var),
    SmoothL1 { x: Var, y: Var },
    Kl { d: Var, t: Var, p: Vec<f64>, q: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
    param: Option<&'a str>,
}

/// Gradients produced by one backward pass, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<usize, Vec<f64>>,
    by_param: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.by_leaf.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.by_param.get(name).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.by_param.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Adds `other` into `self` (used to sum per-sample gradients of a batch).
    pub fn merge(&mut self, other: Gradients) {
        for (k, g) in other.by_param {
            match self.by_param.get_mut(&k) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.by_param.insert(k, g);
                }
            }
        }
    }
}

/// Single-use computation tape.
pub struct Graph<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
    grad_enabled: bool,
    consumed: Cell<bool>,
    non_finite: Cell<Option<&'static str>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A graph that records values only; nothing requires gradients.
    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            grad_enabled,
            consumed: Cell::new(false),
            non_finite: Cell::new(None),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var], name: &'static str) -> Var {
        if self.non_finite.get().is_none() && !value.iter().all(|x| x.is_finite()) {
            self.non_finite.set(Some(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Cow<'a, [f64]>, requires_grad: bool, param: Option<&'a str>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            param,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf holding owned data.
    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(t.into_data()), requires_grad, None)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Borrowed constant rows, e.g. cached keys/values or a feature bank.
    pub fn constant_slice(&self, data: &'a [f64], shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err("constant_slice", format!("{shape:?} vs {} values", data.len())));
        }
        Ok(self.push_leaf(shape, Cow::Borrowed(data), false, None))
    }

    /// Borrowed parameter leaf; requires grad iff the parameter is trainable.
    pub fn param(&self, store: &'a ParamStore, name: &str) -> Result<Var> {
        let (key, p) = store.entry(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(self.push_leaf(p.value.shape().to_vec(), Cow::Borrowed(p.value.data()), p.trainable, Some(key)))
    }

    /// Borrowed parameter leaf that never receives gradients.
    pub fn frozen_param(&self, store: &'a ParamStore, name: &str) -> Result<Var> {
        let (key, p) = store.entry(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(self.push_leaf(p.value.shape().to_vec(), Cow::Borrowed(p.value.data()), false, Some(key)))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn data(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| &*n[v.0].value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].shape.clone(), nodes[v.0].value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node,
    /// laid out `[heads][rows][cols]`.
    pub fn attention_probs(&self, v: Var) -> Option<Rc<Vec<f64>>> {
        match &self.nodes.borrow()[v.0].op {
            Op::Attention { probs, .. } => Some(Rc::clone(probs)),
            _ => None,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            Some(op) => Err(TensorError::NonFinite(op)),
            None => Ok(()),
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let nodes = self.nodes.borrow();
        let s = &nodes[v.0].shape;
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(shape_err(op, format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, p) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{p}]")));
        }
        let out = {
            let nodes = self.nodes.borrow();
            kernels::matmul(&nodes[a.0].value, &nodes[b.0].value, m, k, p)
        };
        flops::add(2 * (m * k * p) as u64);
        Ok(self.push(vec![m, p], out, Op::MatMul { a, b, m, k, p }, &[a, b], "matmul"))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            if nodes[a.0].shape != nodes[b.0].shape {
                return Err(shape_err("add", format!("{:?} vs {:?}", nodes[a.0].shape, nodes[b.0].shape)));
            }
            let out: Vec<f64> = nodes[a.0].value.iter().zip(nodes[b.0].value.iter()).map(|(x, y)| x + y).collect();
            (nodes[a.0].shape.clone(), out)
        };
        flops::add(out.len() as u64);
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b], "add"))
    }

    /// Adds a `[d]` bias to every row of an `[n×d]` input.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "add_bias")?;
        let out = {
            let nodes = self.nodes.borrow();
            if nodes[bias.0].value.len() != d {
                return Err(shape_err("add_bias", format!("bias len {} vs {d}", nodes[bias.0].value.len())));
            }
            let b = &nodes[bias.0].value;
            let mut out = nodes[x.0].value.to_vec();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(b.iter()).for_each(|(o, bi)| *o += bi);
            }
            out
        };
        flops::add((n * d) as u64);
        Ok(self.push(vec![n, d], out, Op::AddBias { x, bias }, &[x, bias], "add_bias"))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].shape.clone(), nodes[x.0].value.iter().map(|v| v * s).collect::<Vec<_>>())
        };
        flops::add(out.len() as u64);
        self.push(shape, out, Op::Scale(x, s), &[x], "scale")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, x: Var) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let out: Vec<f64> = nodes[x.0]
                .value
                .iter()
                .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
                .collect();
            (nodes[x.0].shape.clone(), out)
        };
        flops::add(out.len() as u64);
        self.push(shape, out, Op::Gelu(x), &[x], "gelu")
    }

    /// Row-wise layer norm with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "layer_norm")?;
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            if nodes[gain.0].value.len() != d || nodes[bias.0].value.len() != d {
                return Err(shape_err("layer_norm", "gain/bias length mismatch"));
            }
            let (g, b) = (&nodes[gain.0].value, &nodes[bias.0].value);
            let xs = &nodes[x.0].value;
            let mut out = vec![0.0; n * d];
            let mut xhat = vec![0.0; n * d];
            let mut rstd = vec![0.0; n];
            for i in 0..n {
                let row = &xs[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let r = 1.0 / (var + LN_EPS).sqrt();
                rstd[i] = r;
                for j in 0..d {
                    let h = (row[j] - mean) * r;
                    xhat[i * d + j] = h;
                    out[i * d + j] = h * g[j] + b[j];
                }
            }
            (out, xhat, rstd)
        };
        flops::add(5 * (n * d) as u64);
        Ok(self.push(vec![n, d], out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias], "layer_norm"))
    }

    /// Gathers rows of an `[rows×d]` table.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "embedding")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err("embedding", format!("id {bad} out of range {rows}")));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(&t[i * d..(i + 1) * d]);
            }
            out
        };
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table], "embedding"))
    }

    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x, "gather_rows")?;
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", format!("row {bad} out of range {n}")));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let xs = &nodes[x.0].value;
            idx.iter().flat_map(|&i| xs[i * d..(i + 1) * d].iter().copied()).collect()
        };
        Ok(self.push(vec![idx.len(), d], out, Op::GatherRows { x, idx: idx.to_vec() }, &[x], "gather_rows"))
    }

    pub fn concat_rows(&self, a: Var, b: Var) -> Result<Var> {
        let (na, da) = self.dims2(a, "concat_rows")?;
        let (nb, db) = self.dims2(b, "concat_rows")?;
        if da != db {
            return Err(shape_err("concat_rows", format!("widths {da} vs {db}")));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.to_vec();
            out.extend_from_slice(&nodes[b.0].value);
            out
        };
        Ok(self.push(vec![na + nb, da], out, Op::ConcatRows(a, b), &[a, b], "concat_rows"))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[n×d]`, `k` and `v` are `[m×d]`; each of the `heads` slices of
    /// width `d/heads` attends over the keys its mask row leaves visible.
    /// A query row with no visible key outputs zeros.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, mask: Rc<AttnMask>) -> Result<Var> {
        let (n, d) = self.dims2(q, "attention")?;
        let (m, dk) = self.dims2(k, "attention")?;
        let (mv, dv) = self.dims2(v, "attention")?;
        if dk != d || dv != d || mv != m {
            return Err(shape_err("attention", format!("q [{n}x{d}] k [{m}x{dk}] v [{mv}x{dv}]")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("{d} not divisible into {heads} heads")));
        }
        if mask.rows() != n || mask.cols() != m {
            return Err(shape_err(
                "attention",
                format!("mask {}x{} for scores {n}x{m}", mask.rows(), mask.cols()),
            ));
        }
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        let mut visible_pairs = 0u64;
        {
            let nodes = self.nodes.borrow();
            let (qs, ks, vs) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let mut scores = Vec::with_capacity(m);
            let mut cols = Vec::with_capacity(m);
            for i in 0..n {
                cols.clear();
                cols.extend(mask.row(i).iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j));
                if cols.is_empty() {
                    continue;
                }
                visible_pairs += cols.len() as u64;
                for h in 0..heads {
                    let qi = &qs[i * d + h * dh..i * d + (h + 1) * dh];
                    scores.clear();
                    scores.extend(cols.iter().map(|&j| dot(qi, &ks[j * d + h * dh..j * d + (h + 1) * dh]) * inv_sqrt));
                    kernels::softmax_slice(&mut scores, 1.0);
                    let prow = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                    let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                    for (&j, &p) in cols.iter().zip(scores.iter()) {
                        prow[j] = p;
                        kernels::axpy(orow, p, &vs[j * d + h * dh..j * d + (h + 1) * dh]);
                    }
                }
            }
        }
        flops::add(visible_pairs * heads as u64 * (4 * dh as u64 + flops::SOFTMAX_PER_ELEMENT));
        Ok(self.push(
            vec![n, d],
            out,
            Op::Attention { q, k, v, heads, probs: Rc::new(probs), mask },
            &[q, k, v],
            "attention",
        ))
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax_rows(&self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(TensorError::Param(format!("softmax temperature must be > 0, got {temperature}")));
        }
        let (n, c) = self.dims2(x, "softmax_rows")?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            kernels::softmax_slice(row, temperature);
        }
        flops::add(flops::SOFTMAX_PER_ELEMENT * (n * c) as u64);
        Ok(self.push(vec![n, c], out, Op::SoftmaxRows { x, temperature }, &[x], "softmax_rows"))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x], "sum")
    }

    /// Weighted sum of scalar terms.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(t, w) in terms {
            let scaled = self.scale(t, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| TensorError::Param("weighted_sum of no terms".into()))
    }

    /// Mean over all elements of the piecewise smooth-L1 penalty.
    pub fn smooth_l1(&self, x: Var, y: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            if nodes[x.0].shape != nodes[y.0].shape {
                return Err(shape_err("smooth_l1", format!("{:?} vs {:?}", nodes[x.0].shape, nodes[y.0].shape)));
            }
            let n = nodes[x.0].value.len().max(1);
            nodes[x.0]
                .value
                .iter()
                .zip(nodes[y.0].value.iter())
                .map(|(a, b)| smooth_l1_scalar(a - b))
                .sum::<f64>()
                / n as f64
        };
        Ok(self.push(vec![1], vec![value], Op::SmoothL1 { x, y }, &[x, y], "smooth_l1"))
    }

    /// Mean over rows of `KL(softmax(d) || softmax(t))`.
    pub fn kl_divergence(&self, d: Var, t: Var) -> Result<Var> {
        let (n, c) = self.dims2(d, "kl_divergence")?;
        if self.shape(t) != self.shape(d) {
            return Err(shape_err("kl_divergence", format!("{:?} vs {:?}", self.shape(d), self.shape(t))));
        }
        if c < 2 {
            return Err(shape_err("kl_divergence", "vocabulary must have at least 2 entries"));
        }
        let mut logp = self.data(d).to_vec();
        let mut logq = self.data(t).to_vec();
        let mut total = 0.0;
        for (lp, lq) in logp.chunks_mut(c).zip(logq.chunks_mut(c)) {
            kernels::log_softmax_slice(lp);
            kernels::log_softmax_slice(lq);
            total += lp.iter().zip(lq.iter()).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
        }
        let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        let q: Vec<f64> = logq.iter().map(|v| v.exp()).collect();
        let value = total / n as f64;
        Ok(self.push(vec![1], vec![value], Op::Kl { d, t, p, q }, &[d, t], "kl_divergence"))
    }

    /// Mean next-token cross-entropy of `[n×V]` logits against `targets`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy", format!("target {bad} out of range {c}")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            kernels::log_softmax_slice(row);
            total -= row[t];
            row.iter_mut().for_each(|v| *v = v.exp());
        }
        let value = total / n as f64;
        Ok(self.push(
            vec![1],
            vec![value],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
            "cross_entropy",
        ))
    }

    /// Reverse pass from a scalar loss. A graph supports exactly one call.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(TensorError::GraphConsumed);
        }
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalar(nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = nodes[id].op {
                grads[id] = Some(g);
                continue;
            }
            backward_op(&nodes, id, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (id, g) in grads.into_iter().enumerate() {
            let (Some(g), Op::Leaf) = (g, &nodes[id].op) else { continue };
            if let Some(name) = nodes[id].param {
                match out.by_param.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        out.by_param.insert(name.to_string(), g.clone());
                    }
                }
            }
            out.by_leaf.insert(id, g);
        }
        Ok(out)
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn smooth_l1_scalar(diff: f64) -> f64 {
    let a = diff.abs();
    if a < 1.0 {
        0.5 * diff * diff
    } else {
        a - 0.5
    }
}

fn acc_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node<'_>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn backward_op(nodes: &[Node<'_>], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, p } => {
            let (m, k, p) = (*m, *k, *p);
            acc_into(grads, nodes, *a, |ga| kernels::matmul_a_bt_acc(ga, g, val(*b), m, k, p));
            acc_into(grads, nodes, *b, |gb| kernels::matmul_at_b_acc(gb, val(*a), g, m, k, p));
        }
        Op::Add(a, b) => {
            acc_into(grads, nodes, *a, |ga| kernels::axpy(ga, 1.0, g));
            acc_into(grads, nodes, *b, |gb| kernels::axpy(gb, 1.0, g));
        }
        Op::AddBias { x, bias } => {
            acc_into(grads, nodes, *x, |gx| kernels::axpy(gx, 1.0, g));
            acc_into(grads, nodes, *bias, |gb| {
                let d = gb.len();
                for row in g.chunks(d) {
                    kernels::axpy(gb, 1.0, row);
                }
            });
        }
        Op::Scale(x, s) => acc_into(grads, nodes, *x, |gx| kernels::axpy(gx, *s, g)),
        Op::Gelu(x) => acc_into(grads, nodes, *x, |gx| {
            for ((o, &v), &gi) in gx.iter_mut().zip(val(*x)).zip(g) {
                let u = GELU_C * (v + 0.044715 * v * v * v);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                *o += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
            }
        }),
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = val(*gain).len();
            let gv = val(*gain);
            acc_into(grads, nodes, *gain, |gg| {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            });
            acc_into(grads, nodes, *bias, |gb| {
                for grow in g.chunks(d) {
                    kernels::axpy(gb, 1.0, grow);
                }
            });
            acc_into(grads, nodes, *x, |gx| {
                let mut dh = vec![0.0; d];
                for (i, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    for j in 0..d {
                        dh[j] = grow[j] * gv[j];
                    }
                    let s1: f64 = dh.iter().sum::<f64>() / d as f64;
                    let s2: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let out = &mut gx[i * d..(i + 1) * d];
                    for j in 0..d {
                        out[j] += rstd[i] * (dh[j] - s1 - hrow[j] * s2);
                    }
                }
            });
        }
        Op::Embedding { table, ids } => acc_into(grads, nodes, *table, |gt| {
            let d = g.len() / ids.len().max(1);
            for (r, &i) in ids.iter().enumerate() {
                kernels::axpy(&mut gt[i * d..(i + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
            }
        }),
        Op::GatherRows { x, idx } => acc_into(grads, nodes, *x, |gx| {
            let d = g.len() / idx.len().max(1);
            for (r, &i) in idx.iter().enumerate() {
                kernels::axpy(&mut gx[i * d..(i + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
            }
        }),
        Op::ConcatRows(a, b) => {
            let na = val(*a).len();
            acc_into(grads, nodes, *a, |ga| kernels::axpy(ga, 1.0, &g[..na]));
            acc_into(grads, nodes, *b, |gb| kernels::axpy(gb, 1.0, &g[na..]));
        }
        Op::Attention { q, k, v, heads, probs, mask } => {
            attention_backward(nodes, grads, g, (*q, *k, *v), *heads, probs, mask);
        }
        Op::SoftmaxRows { x, temperature } => acc_into(grads, nodes, *x, |gx| {
            let y = &nodes[id].value;
            let c = *nodes[id].shape.last().unwrap_or(&1);
            for ((grow, yrow), orow) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    orow[j] += yrow[j] * (grow[j] - s) / temperature;
                }
            }
        }),
        Op::Sum(x) => acc_into(grads, nodes, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
        Op::SmoothL1 { x, y } => {
            let (xs, ys) = (val(*x), val(*y));
            let scale = g[0] / xs.len().max(1) as f64;
            let slope = |i: usize| (xs[i] - ys[i]).clamp(-1.0, 1.0) * scale;
            acc_into(grads, nodes, *x, |gx| gx.iter_mut().enumerate().for_each(|(i, o)| *o += slope(i)));
            acc_into(grads, nodes, *y, |gy| gy.iter_mut().enumerate().for_each(|(i, o)| *o -= slope(i)));
        }
        Op::Kl { d, t, p, q } => {
            let c = *nodes[d.0].shape.last().unwrap_or(&1);
            let rows = p.len() / c;
            let scale = g[0] / rows as f64;
            acc_into(grads, nodes, *d, |gd| {
                for r in 0..rows {
                    let (pr, qr) = (&p[r * c..(r + 1) * c], &q[r * c..(r + 1) * c]);
                    let a: Vec<f64> = pr.iter().zip(qr).map(|(pi, qi)| pi.ln() - qi.ln()).collect();
                    let mean: f64 = pr.iter().zip(&a).map(|(pi, ai)| pi * ai).sum();
                    for j in 0..c {
                        gd[r * c + j] += scale * pr[j] * (a[j] - mean);
                    }
                }
            });
            acc_into(grads, nodes, *t, |gt| {
                for (j, o) in gt.iter_mut().enumerate() {
                    *o += scale * (q[j] - p[j]);
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs } => acc_into(grads, nodes, *logits, |gl| {
            let c = probs.len() / targets.len().max(1);
            let scale = g[0] / targets.len().max(1) as f64;
            for (r, &t) in targets.iter().enumerate() {
                for j in 0..c {
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                }
            }
        }),
    }
}

fn attention_backward(
    nodes: &[Node<'_>],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (Var, Var, Var),
    heads: usize,
    probs: &[f64],
    mask: &AttnMask,
) {
    let (qs, ks, vs) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let d = nodes[q.0].shape[1];
    let n = nodes[q.0].shape[0];
    let m = nodes[k.0].shape[0];
    let dh = d / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; n * d];
    let mut gk = vec![0.0; m * d];
    let mut gv = vec![0.0; m * d];
    let mut dp = vec![0.0; m];
    for i in 0..n {
        let row = mask.row(i);
        for h in 0..heads {
            let prow = &probs[(h * n + i) * m..(h * n + i + 1) * m];
            let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
            let mut s = 0.0;
            for j in 0..m {
                if !row[j] {
                    continue;
                }
                dp[j] = dot(go, &vs[j * d + h * dh..j * d + (h + 1) * dh]);
                s += prow[j] * dp[j];
                kernels::axpy(&mut gv[j * d + h * dh..j * d + (h + 1) * dh], prow[j], go);
            }
            let qi = &qs[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..m {
                if !row[j] {
                    continue;
                }
                let ds = prow[j] * (dp[j] - s) * inv_sqrt;
                if ds == 0.0 {
                    continue;
                }
                kernels::axpy(&mut gq[i * d + h * dh..i * d + (h + 1) * dh], ds, &ks[j * d + h * dh..j * d + (h + 1) * dh]);
                kernels::axpy(&mut gk[j * d + h * dh..j * d + (h + 1) * dh], ds, qi);
            }
        }
    }
    acc_into(grads, nodes, q, |o| kernels::axpy(o, 1.0, &gq));
    acc_into(grads, nodes, k, |o| kernels::axpy(o, 1.0, &gk));
    acc_into(grads, nodes, v, |o| kernels::axpy(o, 1.0, &gv));
}
