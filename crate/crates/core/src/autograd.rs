//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows the [`ParamStore`] it reads from, records every
//! operation as a node, and [`Graph::backward`] walks the tape in reverse.
//! Parameter tables used through [`Graph::embed`] receive sparse row
//! gradients so vocabulary-sized tables are never materialised per example.

use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Embed { table: ParamId, idx: Vec<usize> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { a: Var, row: Var },
    Scale { a: Var, s: f64 },
    Exp(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SelectRows { a: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Transpose(Var),
    BceLogits { z: Var, target: f64 },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-12;

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Constant input that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked (gradient checks, probes).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gathers rows of a parameter table.
    pub fn embed(&mut self, table: ParamId, idx: &[usize]) -> Var {
        let t = self.store.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let trainable = self.store.get(table).trainable;
        self.push(
            Tensor::new(idx.len(), cols, data),
            Op::Embed {
                table,
                idx: idx.to_vec(),
            },
            trainable,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b), false);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul { a, b, trans_b: false }, rg)
    }

    /// `a · bᵀ`; with `b` stored as `out x in` this is a linear map.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b), true);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul { a, b, trans_b: true }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a single row");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow { a, row }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale { a, s }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with affine `1 x c` gain and shift.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let x = self.value(a);
        let (g, b) = (self.value(gamma), self.value(beta));
        let cols = x.cols();
        let mut xhat = Tensor::zeros(x.rows(), cols);
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut out = Tensor::zeros(x.rows(), cols);
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    /// Sums over rows, producing a `1 x c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(1, t.cols(), out), Op::SumRows(a), rg)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(idx.len(), t.cols(), data);
        let rg = self.rg(a);
        self.push(
            v,
            Op::SelectRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.select_rows(a, &[i])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols { a, start }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Numerically stable binary cross-entropy on a `1 x 1` logit.
    pub fn bce_logits(&mut self, z: Var, target: f64) -> Var {
        let zv = self.scalar(z);
        let loss = zv.max(0.0) - zv * target + (-zv.abs()).exp().ln_1p();
        let rg = self.rg(z);
        self.push(Tensor::scalar(loss), Op::BceLogits { z, target }, rg)
    }

    /// Squared error `(a - b)²` summed over entries.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.sum_all(sq)
    }

    /// Cosine similarity of two same-shape tensors as a `1 x 1` node.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let ab = self.mul(a, b);
        let dot = self.sum_all(ab);
        let aa = self.mul(a, a);
        let na = self.sum_all(aa);
        let bb = self.mul(b, b);
        let nb = self.sum_all(bb);
        let prod = self.mul(na, nb);
        let denom = self.sqrt(prod);
        self.div(dot, denom)
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let root_val = self.value(root);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(root_val.rows(), root_val.cols(), 1.0));
        let mut sparse_rows: Vec<(ParamId, usize, Vec<f64>)> = Vec::new();
        let mut dense: Vec<(ParamId, Tensor)> = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    dense.push((*id, g));
                }
                Op::Embed { table, idx } => {
                    for (r, &row) in idx.iter().enumerate() {
                        sparse_rows.push((*table, row, g.row(r).to_vec()));
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let ga = g.matmul(bv, !*trans_b);
                        acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = if *trans_b { g.t_matmul(av) } else { av.t_matmul(&g) };
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.zip_map(bv, |x, y| x * y));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.zip_map(av, |x, y| x * y));
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.zip_map(bv, |x, y| x / y));
                    }
                    if self.rg(*b) {
                        let mut gb = g.zip_map(av, |x, y| -x * y);
                        gb = gb.zip_map(bv, |x, y| x / (y * y));
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::AddRow { a, row } => {
                    if self.rg(*row) {
                        let mut gr = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for (o, v) in gr.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *row, Tensor::new(1, g.cols(), gr));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale { a, s } => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Exp(a) => {
                    let y = self.value(Var(i));
                    acc(&mut grads, *a, g.zip_map(y, |x, y| x * y));
                }
                Op::Sqrt(a) => {
                    let y = self.value(Var(i));
                    acc(&mut grads, *a, g.zip_map(y, |x, y| x / (2.0 * y)));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |d, x| if x > 0.0 { d } else { 0.0 }));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |d, x| d * gelu_grad(x)));
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(i));
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    a,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let cols = g.cols();
                    if self.rg(*gamma) || self.rg(*beta) {
                        let mut gg = vec![0.0; cols];
                        let mut gb = vec![0.0; cols];
                        for r in 0..g.rows() {
                            for c in 0..cols {
                                gg[c] += g.get(r, c) * xhat.get(r, c);
                                gb[c] += g.get(r, c);
                            }
                        }
                        if self.rg(*gamma) {
                            acc(&mut grads, *gamma, Tensor::new(1, cols, gg));
                        }
                        if self.rg(*beta) {
                            acc(&mut grads, *beta, Tensor::new(1, cols, gb));
                        }
                    }
                    if self.rg(*a) {
                        let n = cols as f64;
                        let mut ga = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            let dxhat: Vec<f64> =
                                (0..cols).map(|c| g.get(r, c) * gv.data()[c]).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / n;
                            let mean_dx =
                                (0..cols).map(|c| dxhat[c] * xhat.get(r, c)).sum::<f64>() / n;
                            for c in 0..cols {
                                ga.set(
                                    r,
                                    c,
                                    inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx),
                                );
                            }
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Tensor::filled(r, c, g.item() / (r * c) as f64));
                }
                Op::SumRows(a) => {
                    let rows = self.value(*a).rows();
                    let mut ga = Tensor::zeros(rows, g.cols());
                    for r in 0..rows {
                        ga.row_mut(r).copy_from_slice(g.data());
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SelectRows { a, idx } => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.rg(p) {
                            let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                            acc(&mut grads, p, Tensor::new(rows, cols, slice));
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let mut gp = Tensor::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            acc(&mut grads, p, gp);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    acc(&mut grads, *a, g.transpose());
                }
                Op::BceLogits { z, target } => {
                    let zv = self.scalar(*z);
                    acc(&mut grads, *z, Tensor::scalar(g.item() * (sigmoid(zv) - target)));
                }
            }
        }

        Gradients {
            nodes: grads,
            dense,
            sparse_rows,
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    dense: Vec<(ParamId, Tensor)>,
    sparse_rows: Vec<(ParamId, usize, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to an [`Graph::input`] leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Adds all parameter gradients, scaled by `scale`, into `buf`.
    pub fn accumulate_into(&self, store: &ParamStore, buf: &mut GradBuffer, scale: f64) {
        for (id, g) in &self.dense {
            if scale == 1.0 {
                buf.accumulate(*id, g);
            } else {
                buf.accumulate(*id, &g.map(|x| x * scale));
            }
        }
        for (id, row, g) in &self.sparse_rows {
            let (rows, cols) = store.value(*id).shape();
            buf.accumulate_row(*id, rows, cols, *row, g, scale);
        }
    }

    /// Dense gradient for one parameter (sums repeated uses).
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Tensor {
        let (rows, cols) = store.value(id).shape();
        let mut out = Tensor::zeros(rows, cols);
        for (pid, g) in &self.dense {
            if *pid == id {
                out.add_assign(g);
            }
        }
        for (pid, row, g) in &self.sparse_rows {
            if *pid == id {
                for (o, v) in out.row_mut(*row).iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        out
    }
}

impl GradBuffer {
    pub(crate) fn accumulate_row(
        &mut self,
        id: ParamId,
        rows: usize,
        cols: usize,
        row: usize,
        g: &[f64],
        scale: f64,
    ) {
        let slot = self.slot_mut(id, rows, cols);
        for (o, v) in slot.row_mut(row).iter_mut().zip(g) {
            *o += v * scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn numeric<F: Fn(&Tensor) -> f64>(f: F, x: &Tensor) -> Tensor {
        let h = 1e-5;
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn close(a: &Tensor, b: &Tensor) {
        let diff = a.zip_map(b, |x, y| x - y).norm();
        let scale = a.norm().max(b.norm()).max(1e-12);
        assert!(diff / scale < 1e-6, "relative error {}: {a:?} vs {b:?}", diff / scale);
    }

    fn x0() -> Tensor {
        Tensor::new(2, 3, vec![0.3, -1.2, 0.7, 1.5, 0.1, -0.4])
    }

    fn check(build: impl Fn(&mut Graph, Var) -> Var) {
        let store = ParamStore::new();
        let f = |x: &Tensor| {
            let mut g = Graph::new(&store);
            let v = g.input(x.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new(&store);
        let v = g.input(x0());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        close(grads.wrt(v).unwrap(), &numeric(f, &x0()));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check(|g, x| {
            let e = g.exp(x);
            let s = g.gelu(e);
            let m = g.mul(s, x);
            g.sum_all(m)
        });
        check(|g, x| {
            let sq = g.mul(x, x);
            let one = g.constant(Tensor::filled(2, 3, 1.0));
            let p = g.add(sq, one);
            let r = g.sqrt(p);
            let d = g.div(x, r);
            g.mean_all(d)
        });
    }

    #[test]
    fn softmax_and_layer_norm_match_finite_differences() {
        check(|g, x| {
            let s = g.softmax_rows(x);
            let w = g.constant(Tensor::new(2, 3, vec![1., 2., 3., -1., 0.5, 2.]));
            let m = g.mul(s, w);
            g.sum_all(m)
        });
        check(|g, x| {
            let gamma = g.constant(Tensor::row_vector(&[1.0, 0.5, 2.0]));
            let beta = g.constant(Tensor::row_vector(&[0.1, 0.0, -0.3]));
            let y = g.layer_norm(x, gamma, beta);
            let w = g.constant(Tensor::new(2, 3, vec![1., -2., 3., 0.5, 0.5, 2.]));
            let m = g.mul(y, w);
            g.sum_all(m)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check(|g, x| {
            let t = g.transpose(x);
            let p = g.matmul(x, t);
            let q0 = g.matmul(p, x);
            let q1 = g.matmul_nt(q0, x);
            let q = g.matmul(q1, x);
            let a = g.slice_cols(q, 1, 2);
            let b = g.select_rows(q, &[1, 1, 0]);
            let a1 = g.slice_cols(q, 0, 1);
            let c = g.concat_cols(&[a, a1]);
            let d = g.concat_rows(&[c, b]);
            let e = g.sum_rows(d);
            let s = g.mul(e, e);
            g.sum_all(s)
        });
        check(|g, x| {
            let r = g.row(x, 1);
            let z = g.sum_all(r);
            g.bce_logits(z, 1.0)
        });
    }

    #[test]
    fn embed_produces_sparse_table_gradients() {
        let mut store = ParamStore::new();
        let table = store.add(
            "emb",
            Tensor::new(3, 2, vec![1., 2., 3., 4., 5., 6.]),
            ParamGroup::Backbone,
            true,
        );
        let mut g = Graph::new(&store);
        let e = g.embed(table, &[2, 0, 2]);
        let s = g.sum_all(e);
        let grads = g.backward(s);
        let dense = grads.param(&store, table);
        assert_eq!(dense.data(), &[1., 1., 0., 0., 2., 2.]);
        let mut buf = GradBuffer::new(&store);
        grads.accumulate_into(&store, &mut buf, 0.5);
        assert_eq!(buf.get(table).unwrap().data(), &[0.5, 0.5, 0., 0., 1., 1.]);
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0), ParamGroup::Head, true);
        store.freeze_all();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::scalar(3.0));
        let wv = g.param(w);
        let y = g.mul(x, wv);
        let grads = g.backward(y);
        assert_eq!(grads.param(&store, w).item(), 0.0);
        assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
    }
}
