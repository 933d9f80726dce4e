//! A small tape-based reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that depends on a
//! parameter leaf. Constants never receive gradients.

use std::sync::Arc;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Pick { x: Var, idx: Vec<(usize, usize)> },
    Sum(Var),
    MeanRows(Var),
    RowMax { x: Var, argmax: Vec<usize> },
    LogSumExp(Var),
    Minimum(Var, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Transpose(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.param_shared(Arc::new(t))
    }

    pub fn param_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.constant_shared(Arc::new(t))
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, ca), "add_row expects a 1x{ca} row");
        let mut v = self.value(a).clone();
        let r = self.value(row).row(0).to_vec();
        for i in 0..ra {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(v, Op::LogSigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    /// Row-wise softmax. With `causal`, row `i` only sees columns `0..=i`
    /// (masked entries are exactly zero).
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = &x.row(i)[..width];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(i);
            let mut s = 0.0;
            for j in 0..width {
                o[j] = (row[j] - m).exp();
                s += o[j];
            }
            for v in &mut o[..width] {
                *v /= s;
            }
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let lp = crate::tensor::log_softmax(x.row(i));
            out.row_mut(i).copy_from_slice(&lp);
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut out = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().fold(0.0, |acc, &v| acc + v) / c as f64;
            let var = row.iter().fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&ts);
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_rows(start, end);
        self.push(v, Op::SliceRows { x: a, start }, &[a])
    }

    /// Picks elements `(row, col)` into an `n x 1` column.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let v = Tensor::column(idx.iter().map(|&(r, c)| x.get(r, c)).collect());
        self.push(v, Op::Pick { x: a, idx: idx.to_vec() }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `n x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut out = Tensor::zeros(1, c);
        for i in 0..r {
            for (o, &v) in out.row_mut(0).iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / r as f64);
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// Per-row maximum as an `n x 1` column; the gradient flows to the first
    /// maximal entry.
    pub fn row_max(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut vals = Vec::with_capacity(x.rows());
        let mut argmax = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            vals.push(row[best]);
            argmax.push(best);
        }
        self.push(Tensor::column(vals), Op::RowMax { x: a, argmax }, &[a])
    }

    /// `log Σ exp` over every element, as a scalar.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(crate::tensor::log_sum_exp(self.value(a).data()));
        self.push(v, Op::LogSumExp(a), &[a])
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), f64::min);
        self.push(v, Op::Minimum(a, b), &[a, b])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { x: a, lo, hi }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ ; da = g b ; db = gᵀ a
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[row.0].needs_grad {
                    let mut r = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &v) in r.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, r);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |d, y| d * (1.0 - y * y))),
            Op::Gelu(a) => {
                let d = self.value(*a).zip_map(g, |x, dy| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(out, |d, y| d * y * (1.0 - y))),
            Op::LogSigmoid(a) => {
                let d = self.value(*a).zip_map(g, |x, dy| dy * sigmoid(-x));
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |d, y| d * y)),
            Op::Log(a) => {
                let d = self.value(*a).zip_map(g, |x, dy| dy / x);
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let mut d = Tensor::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gy = g.row(i);
                    let s = crate::tensor::dot(y, gy);
                    for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                        *o = y[j] * (gy[j] - s);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let mut d = Tensor::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let lp = out.row(i);
                    let gy = g.row(i);
                    let s = gy.iter().fold(0.0, |acc, &v| acc + v);
                    for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                        *o = gy[j] - lp[j].exp() * s;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = out.cols() as f64;
                let mut d = Tensor::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gy = g.row(i);
                    let mean_g = gy.iter().fold(0.0, |acc, &v| acc + v) / c;
                    let mean_gy = crate::tensor::dot(gy, y) / c;
                    for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                        *o = inv_std[i] * (gy[j] - mean_g - y[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, &v) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).rows();
                    if self.nodes[p.0].needs_grad {
                        self.accumulate(grads, *p, g.slice_rows(start, start + n));
                    }
                    start += n;
                }
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    d.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Pick { x, idx } => {
                let src = self.value(*x);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for (i, &(r, c)) in idx.iter().enumerate() {
                    d.set(r, c, d.get(r, c) + g.get(i, 0));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o = v / r as f64;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowMax { x, argmax } => {
                let src = self.value(*x);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for (i, &j) in argmax.iter().enumerate() {
                    d.set(i, j, g.get(i, 0));
                }
                self.accumulate(grads, *x, d);
            }
            Op::LogSumExp(a) => {
                let lse = out.item();
                let d = self.value(*a).map(|v| (v - lse).exp() * g.item());
                self.accumulate(grads, *a, d);
            }
            Op::Minimum(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let mut da = Tensor::zeros(va.rows(), va.cols());
                let mut db = Tensor::zeros(va.rows(), va.cols());
                for k in 0..va.len() {
                    if va.data()[k] <= vb.data()[k] {
                        da.data_mut()[k] = g.data()[k];
                    } else {
                        db.data_mut()[k] = g.data()[k];
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Clamp { x, lo, hi } => {
                let d = self.value(*x).zip_map(g, |v, dy| if v >= *lo && v <= *hi { dy } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}
