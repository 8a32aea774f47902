//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every op as a node in creation order, so the node
//! list is already a topological order and `backward` is a single reverse
//! sweep. Gradients are computed once per graph: calling `backward` a second
//! time is an error, and a fresh graph is built for every pass.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::gemm::{gemm, MatRef};
use super::{ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sin(Var),
    Cos(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
    inference: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Builds a lower-triangular (causal) mask of size `n x n`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameter leaves never require gradients.
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let requires_grad = !self.inference && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    /// Adds a leaf holding `rows x cols` values.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::shape(
                "leaf",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, value.len()),
            ));
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && !self.inference,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, value, false)
    }

    pub fn tensor(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.leaf(r, c, t.data().to_vec(), t.requires_grad)
            .expect("tensor shape is consistent")
    }

    /// Leaf bound to a stored parameter; reused if already bound in this graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let (r, c) = p.tensor.dims2();
        self.nodes.push(Node {
            rows: r,
            cols: c,
            value: p.tensor.data().to_vec(),
            op: Op::Param,
            requires_grad: !p.frozen && !self.inference,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::new(self.value(a), m, k, k),
            MatRef::new(self.value(b), k, n, n),
            0.0,
            &mut out,
            n,
        );
        Ok(self.push(m, n, out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::new(self.value(a), m, k, k),
            MatRef::new(self.value(b), n, k, k).t(),
            0.0,
            &mut out,
            n,
        );
        Ok(self.push(m, n, out, Op::MatMulT(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(r, c, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(r, c, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(r, c, out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::shape("add_row", format!("{r}x{c} + {:?}", self.dims(row))));
        }
        let bias = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(c.max(1)) {
            for (o, b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(self.push(r, c, out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(r, c, out, Op::Gelu(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.sin()).collect();
        self.push(r, c, out, Op::Sin(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.cos()).collect();
        self.push(r, c, out, Op::Cos(a), &[a])
    }

    /// Row-wise softmax, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        self.push(r, c, out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row standardization followed by the affine `gain`/`bias` (each `1 x c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c == 0 || self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::shape(
                "layer_norm",
                format!("x {r}x{c}, gain {:?}, bias {:?}", self.dims(gain), self.dims(bias)),
            ));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `mask` is `Tq x Tk` row-major with `true` marking allowed keys; every
    /// query row must allow at least one key. Heads split the feature
    /// columns of `q`/`k` and of `v` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
        let (tq, d) = self.dims(q);
        let (tk, dk) = self.dims(k);
        let (tv, dv) = self.dims(v);
        if d != dk || tk != tv || heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("q {tq}x{d}, k {tk}x{dk}, v {tv}x{dv}, heads {heads}"),
            ));
        }
        if tk == 0 && tq > 0 {
            return Err(Error::Contract("attention over zero keys".into()));
        }
        if let Some(m) = mask {
            if m.len() != tq * tk {
                return Err(Error::shape("attention", format!("mask len {} for {tq}x{tk}", m.len())));
            }
            if let Some(i) = (0..tq).find(|&i| !m[i * tk..(i + 1) * tk].iter().any(|&b| b)) {
                return Err(Error::Contract(format!("attention query row {i} has no allowed key")));
            }
        }
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * dv];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(
                scale,
                MatRef::new(&qv[h * dh..], tq, dh, d),
                MatRef::new(&kv[h * dh..], tk, dh, d).t(),
                0.0,
                p,
                tk,
            );
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                if let Some(m) = mask {
                    for (x, &allowed) in row.iter_mut().zip(&m[i * tk..(i + 1) * tk]) {
                        if !allowed {
                            *x = f64::NEG_INFINITY;
                        }
                    }
                }
                softmax_in_place(row);
            }
            if tq > 0 {
                gemm(
                    1.0,
                    MatRef::new(p, tq, tk, tk),
                    MatRef::new(&vv[h * dvh..], tk, dvh, dv),
                    0.0,
                    &mut out[h * dvh..],
                    dv,
                );
            }
        }
        Ok(self.push(
            tq,
            dv,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`, as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, vocab) = self.dims(logits);
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("{t} rows, {} targets, {} mask", targets.len(), mask.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
            return Err(Error::Invalid(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("cross entropy over an all-masked sequence".into()));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(vocab).enumerate() {
            softmax_in_place(row);
            if mask[i] {
                loss -= row[targets[i]].ln();
            }
        }
        loss /= count as f64;
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let parts: Vec<Var> = parts.iter().copied().filter(|&p| self.dims(p).0 > 0).collect();
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no non-empty parts"));
        };
        let c = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape("concat_rows", format!("cols {pc} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.clone()), &parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no parts"));
        };
        let r = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(r, cols, out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {r}")));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r * c != rows * cols {
            return Err(Error::shape("reshape", format!("{r}x{c} -> {rows}x{cols}")));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(rows, cols, out, Op::Reshape(x), &[x]))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Invalid(format!("row id {bad} outside table of {r} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            ids.len(),
            c,
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r == 0 {
            return Err(Error::shape("mean_rows", "zero rows"));
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Ok(self.push(1, c, out, Op::MeanRows(x), &[x]))
    }

    /// Column-wise max over each group of rows; one output row per group.
    /// Ties resolve to the first row listed in the group.
    pub fn max_pool(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![0.0; groups.len() * c];
        let mut argmax = vec![0; groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() || members.iter().any(|&m| m >= r) {
                return Err(Error::Invalid(format!("max_pool group {g} is empty or out of range")));
            }
            for j in 0..c {
                let mut best = members[0];
                for &m in &members[1..] {
                    if xv[m * c + j] > xv[best * c + j] {
                        best = m;
                    }
                }
                out[g * c + j] = xv[best * c + j];
                argmax[g * c + j] = best;
            }
        }
        Ok(self.push(groups.len(), c, out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x), &[x])
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                backprop(&self.nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the loss w.r.t. `v`, available after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    /// Gradients of every trainable parameter bound in this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<(ParamId, &[f64])> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds this graph's parameter gradients into the store's buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.grads.is_none() {
            return Err(Error::Contract("accumulate_into before backward".into()));
        }
        for (id, g) in self.param_grads() {
            store.accumulate(id, g)?;
        }
        Ok(())
    }
}

/// Lazily allocated gradient buffer of `v`, or `None` if `v` needs no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    if let Some(buf) = slot(nodes, grads, v) {
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
    }
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let (rows, cols) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
            let n = cols;
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(da) = slot(nodes, grads, *a) {
                gemm(1.0, MatRef::new(g, m, n, n), MatRef::new(bv, k, n, n).t(), 1.0, da, k);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm(1.0, MatRef::new(av, m, k, k).t(), MatRef::new(g, m, n, n), 1.0, db, n);
            }
        }
        Op::MatMulT(a, b) => {
            let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
            let n = cols;
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(da) = slot(nodes, grads, *a) {
                gemm(1.0, MatRef::new(g, m, n, n), MatRef::new(bv, n, k, k), 1.0, da, k);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm(1.0, MatRef::new(g, m, n, n).t(), MatRef::new(av, m, k, k), 1.0, db, k);
            }
        }
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, g);
            add_into(nodes, grads, *b, g);
        }
        Op::Sub(a, b) => {
            add_into(nodes, grads, *a, g);
            if let Some(db) = slot(nodes, grads, *b) {
                db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
            }
        }
        Op::Mul(a, b) => {
            let ga: Vec<f64> = g.iter().zip(&nodes[b.0].value).map(|(x, y)| x * y).collect();
            let gb: Vec<f64> = g.iter().zip(&nodes[a.0].value).map(|(x, y)| x * y).collect();
            add_into(nodes, grads, *a, &ga);
            add_into(nodes, grads, *b, &gb);
        }
        Op::AddRow(a, row) => {
            add_into(nodes, grads, *a, g);
            if let Some(dr) = slot(nodes, grads, *row) {
                for chunk in g.chunks(cols.max(1)) {
                    dr.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
            }
        }
        Op::Gelu(a) => {
            let av = &nodes[a.0].value;
            let ga: Vec<f64> = g.iter().zip(av).map(|(x, &v)| x * gelu_grad(v)).collect();
            add_into(nodes, grads, *a, &ga);
        }
        Op::Sin(a) => {
            let ga: Vec<f64> = g.iter().zip(&nodes[a.0].value).map(|(x, v)| x * v.cos()).collect();
            add_into(nodes, grads, *a, &ga);
        }
        Op::Cos(a) => {
            let ga: Vec<f64> = g.iter().zip(&nodes[a.0].value).map(|(x, v)| -x * v.sin()).collect();
            add_into(nodes, grads, *a, &ga);
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let mut ga = vec![0.0; y.len()];
            for r in 0..rows {
                let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for j in 0..cols {
                    ga[r * cols + j] = yr[j] * (gr[j] - dot);
                }
            }
            add_into(nodes, grads, *a, &ga);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = &nodes[gain.0].value;
            if let Some(dg) = slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..cols {
                        dg[j] += g[r * cols + j] * xhat[r * cols + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for r in 0..rows {
                    for j in 0..cols {
                        db[j] += g[r * cols + j];
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let n = cols as f64;
                for r in 0..rows {
                    let off = r * cols;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..cols {
                        let d = g[off + j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xhat[off + j];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    for j in 0..cols {
                        let d = g[off + j] * gv[j];
                        dx[off + j] += rstd[r] * (d - mean_d - xhat[off + j] * mean_dx);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (tq, d) = (nodes[q.0].rows, nodes[q.0].cols);
            let (tk, dv) = (nodes[k.0].rows, nodes[v.0].cols);
            let (dh, dvh) = (d / heads, dv / heads);
            let scale = 1.0 / (dh as f64).sqrt();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let mut dq = vec![0.0; tq * d];
            let mut dk = vec![0.0; tk * d];
            let mut dvv = vec![0.0; tk * dv];
            let mut dp = vec![0.0; tq * tk];
            for h in 0..*heads {
                let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                let go = MatRef::new(&g[h * dvh..], tq, dvh, dv);
                // dP = dO · Vᵀ
                gemm(1.0, go, MatRef::new(&vv[h * dvh..], tk, dvh, dv).t(), 0.0, &mut dp, tk);
                // dV = Pᵀ · dO
                gemm(1.0, MatRef::new(p, tq, tk, tk).t(), go, 1.0, &mut dvv[h * dvh..], dv);
                for r in 0..tq {
                    let (pr, dr) = (&p[r * tk..(r + 1) * tk], &mut dp[r * tk..(r + 1) * tk]);
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..tk {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                gemm(
                    1.0,
                    MatRef::new(&dp, tq, tk, tk),
                    MatRef::new(&kv[h * dh..], tk, dh, d),
                    1.0,
                    &mut dq[h * dh..],
                    d,
                );
                gemm(
                    1.0,
                    MatRef::new(&dp, tq, tk, tk).t(),
                    MatRef::new(&qv[h * dh..], tq, dh, d),
                    1.0,
                    &mut dk[h * dh..],
                    d,
                );
            }
            add_into(nodes, grads, *q, &dq);
            add_into(nodes, grads, *k, &dk);
            add_into(nodes, grads, *v, &dvv);
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            let vocab = nodes[logits.0].cols;
            if let Some(dl) = slot(nodes, grads, *logits) {
                let s = g[0] / *count as f64;
                for (r, &y) in targets.iter().enumerate() {
                    if !mask[r] {
                        continue;
                    }
                    let off = r * vocab;
                    for j in 0..vocab {
                        dl[off + j] += s * probs[off + j];
                    }
                    dl[off + y] -= s;
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                add_into(nodes, grads, *p, &g[off..off + len]);
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let mut col = 0;
            for p in parts {
                let pc = nodes[p.0].cols;
                if let Some(dp) = slot(nodes, grads, *p) {
                    for r in 0..rows {
                        for j in 0..pc {
                            dp[r * pc + j] += g[r * cols + col + j];
                        }
                    }
                }
                col += pc;
            }
        }
        Op::SliceRows { x, start } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let off = start * cols;
                dx[off..off + g.len()].iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        Op::Reshape(x) => add_into(nodes, grads, *x, g),
        Op::GatherRows { table, ids } => {
            if let Some(dt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        dt[id * cols + j] += g[r * cols + j];
                    }
                }
            }
        }
        Op::MeanRows(x) => {
            let xr = nodes[x.0].rows;
            if let Some(dx) = slot(nodes, grads, *x) {
                for r in 0..xr {
                    for j in 0..cols {
                        dx[r * cols + j] += g[j] / xr as f64;
                    }
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (idx, &src) in argmax.iter().enumerate() {
                    let j = idx % cols;
                    dx[src * cols + j] += g[idx];
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}
