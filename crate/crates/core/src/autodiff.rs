//! Reverse-mode differentiation over row-major f64 matrices.
//!
//! A [`Graph`] records every value it computes; [`Graph::backward`] walks the
//! record in reverse. Attention is provided as two fused ops ([`Graph::compat`]
//! and [`Graph::attend`]) so the encoder does not explode into per-scalar nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} tensor", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape m x k and `op(b)` of shape k x n.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents checked by the callers' shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a value in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Normalize { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Compat { q: Var, k: Var, e: Var, shape: AttnShape, scale: f64 },
    Attend { u: Var, e: Var, v: Var, shape: AttnShape, weights: Tensor, probs: Tensor, gates: Tensor },
    LogSoftmaxPick { logits: Var, mask: Vec<bool>, index: usize, probs: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

/// Batched attention layout: `groups` graphs of `nodes` rows each, `heads` heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub groups: usize,
    pub nodes: usize,
    pub heads: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const BN_EPS: f64 = 1e-5;

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

    /// Drop every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let t = self.tracked(x);
        self.push(value, op, t)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, op, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(x.rows, y.cols);
        gemm(x.rows, x.cols, y.cols, &x.data, false, &y.data, false, &mut out.data, 0.0);
        self.binary(a, b, out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "matmul_nt shape mismatch");
        let mut out = Tensor::zeros(x.rows, y.rows);
        gemm(x.rows, x.cols, y.rows, &x.data, false, &y.data, true, &mut out.data, 0.0);
        self.binary(a, b, out, Op::MatMulNT(a, b))
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!((b.rows, b.cols), (1, x.cols), "bias shape mismatch");
        let mut out = x.clone();
        for r in 0..out.rows {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += bb;
            }
        }
        self.binary(a, bias, out, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add shape mismatch");
        let mut out = x.clone();
        out.add_assign(y);
        self.binary(a, b, out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "mul shape mismatch");
        let mut out = x.clone();
        for (o, yy) in out.data.iter_mut().zip(&y.data) {
            *o *= yy;
        }
        self.binary(a, b, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= c);
        self.unary(a, out, Op::Scale(a, c))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = f(*x));
        self.unary(a, out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Which ReLU inputs are positive, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data.iter().map(|&x| x > 0.0))
            .collect()
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + v.cols].copy_from_slice(v.row(r));
            }
            offset += v.cols;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), tracked)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
        }
        let rows = data.len() / cols.max(1);
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec()), tracked)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice out of range");
        let mut out = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.unary(a, out, Op::SliceCols(a, start))
    }

    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(rows.len(), x.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(x.row(r));
        }
        self.unary(a, out, Op::Gather(a, rows.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in out.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / x.rows as f64;
        out.data.iter_mut().for_each(|o| *o *= inv);
        self.unary(a, out, Op::MeanRows(a))
    }

    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut arg = vec![0; x.cols];
        let mut out = Tensor::row_vector(x.row(0).to_vec());
        for r in 1..x.rows {
            for c in 0..x.cols {
                if x.get(r, c) > out.data[c] {
                    out.data[c] = x.get(r, c);
                    arg[c] = r;
                }
            }
        }
        self.unary(a, out, Op::MaxRows(a, arg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.unary(a, out, Op::SoftmaxRows(a))
    }

    /// Normalize each column with the batch statistics of `x`; returns the
    /// output together with the column means and biased variances used.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let d = xv.get(r, c) - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                xhat.data[r * cols + c] = (xv.get(r, c) - mean[c]) * inv_std[c];
            }
        }
        let out = affine_cols(&xhat, self.value(gamma), self.value(beta));
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, tracked);
        (v, mean, var)
    }

    /// Column normalization with fixed statistics.
    pub fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        let xv = self.value(x);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = xv.clone();
        for r in 0..xhat.rows {
            for (c, h) in xhat.row_mut(r).iter_mut().enumerate() {
                *h = (*h - mean[c]) * inv_std[c];
            }
        }
        let out = affine_cols(&xhat, self.value(gamma), self.value(beta));
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let op = Op::Normalize {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            inv_std,
        };
        self.push(out, op, tracked)
    }

    /// Per-head compatibilities `u[g,i,j,m] = <q_i, k_j>_m * scale + e[g,j,i,m]`.
    ///
    /// `q`, `k`: `(groups*nodes) x d`; `e`: `(groups*nodes^2) x heads` in `(g, i, j)` row order.
    /// Output rows follow `(g, i, j)`, one column per head.
    pub fn compat(&mut self, q: Var, k: Var, e: Var, shape: AttnShape, scale: f64) -> Var {
        let AttnShape { groups, nodes, heads } = shape;
        let (qv, kv, ev) = (self.value(q), self.value(k), self.value(e));
        let d = qv.cols;
        let dk = d / heads;
        assert_eq!(ev.rows, groups * nodes * nodes, "edge rows");
        let mut out = Tensor::zeros(groups * nodes * nodes, heads);
        for g in 0..groups {
            for i in 0..nodes {
                let qi = qv.row(g * nodes + i);
                for j in 0..nodes {
                    let kj = kv.row(g * nodes + j);
                    let row = (g * nodes + i) * nodes + j;
                    let eji = ev.row((g * nodes + j) * nodes + i);
                    for m in 0..heads {
                        let s = m * dk;
                        let dot: f64 = qi[s..s + dk].iter().zip(&kj[s..s + dk]).map(|(a, b)| a * b).sum();
                        out.data[row * heads + m] = dot * scale + eji[m];
                    }
                }
            }
        }
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(e);
        let op = Op::Compat { q, k, e, shape, scale };
        self.push(out, op, tracked)
    }

    /// `h'[g,i] = sum_j softmax_j(u[g,i,.,m]) * sigmoid(e[g,j,i,m]) * v[g,j]` per head.
    pub fn attend(&mut self, u: Var, e: Var, v: Var, shape: AttnShape) -> Var {
        let AttnShape { groups, nodes, heads } = shape;
        let (uv, ev, vv) = (self.value(u), self.value(e), self.value(v));
        let d = vv.cols;
        let dk = d / heads;
        let mut probs = Tensor::zeros(groups * nodes * nodes, heads);
        let mut gates = Tensor::zeros(groups * nodes * nodes, heads);
        let mut weights = Tensor::zeros(groups * nodes * nodes, heads);
        let mut out = Tensor::zeros(groups * nodes, d);
        let mut buf = vec![0.0; nodes];
        for g in 0..groups {
            for i in 0..nodes {
                let base = (g * nodes + i) * nodes;
                for m in 0..heads {
                    for j in 0..nodes {
                        buf[j] = uv.data[(base + j) * heads + m];
                    }
                    softmax_in_place(&mut buf);
                    for j in 0..nodes {
                        let gate = sigmoid(ev.data[((g * nodes + j) * nodes + i) * heads + m]);
                        let idx = (base + j) * heads + m;
                        probs.data[idx] = buf[j];
                        gates.data[idx] = gate;
                        weights.data[idx] = buf[j] * gate;
                    }
                }
                let orow = g * nodes + i;
                for j in 0..nodes {
                    let vj = vv.row(g * nodes + j);
                    for m in 0..heads {
                        let w = weights.data[(base + j) * heads + m];
                        let s = m * dk;
                        for c in s..s + dk {
                            out.data[orow * d + c] += w * vj[c];
                        }
                    }
                }
            }
        }
        let tracked = self.tracked(u) || self.tracked(e) || self.tracked(v);
        let op = Op::Attend {
            u,
            e,
            v,
            shape,
            weights,
            probs,
            gates,
        };
        self.push(out, op, tracked)
    }

    /// `log softmax(logits)[index]` over unmasked entries (`mask[i] == true` means excluded).
    pub fn log_softmax_pick(&mut self, logits: Var, mask: &[bool], index: usize) -> Var {
        let x = self.value(logits);
        assert_eq!(x.len(), mask.len(), "mask length");
        assert!(!mask[index], "picked a masked entry");
        let probs = masked_softmax(&x.data, mask);
        let out = Tensor::row_vector(vec![probs[index].ln()]);
        let op = Op::LogSoftmaxPick {
            logits,
            mask: mask.to_vec(),
            index,
            probs,
        };
        self.unary(logits, out, op)
    }

    /// `sum_i w_i * x_i` over scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let tracked = terms.iter().any(|&(v, _)| self.tracked(v));
        self.push(Tensor::row_vector(vec![total]), Op::WeightedSum(terms.to_vec()), tracked)
    }

    /// Gradients of the scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Tensor {
            rows: rv.rows,
            cols: rv.cols,
            data: vec![1.0; rv.len()],
        });
        for id in (0..=root.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].tracked {
                continue;
            }
            self.backprop(Var(id), &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.tracked(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let x = self.value(v);
            *slot = Some(Tensor::zeros(x.rows, x.cols));
        }
        f(slot.as_mut().expect("initialized"));
    }

    fn backprop(&self, id: Var, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.value(id);
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.acc(grads, a, |g| gemm(av.rows, bv.cols, av.cols, &dy.data, false, &bv.data, true, &mut g.data, 1.0));
                self.acc(grads, b, |g| gemm(av.cols, av.rows, bv.cols, &av.data, true, &dy.data, false, &mut g.data, 1.0));
            }
            &Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.acc(grads, a, |g| gemm(av.rows, bv.rows, av.cols, &dy.data, false, &bv.data, false, &mut g.data, 1.0));
                self.acc(grads, b, |g| gemm(bv.rows, av.rows, av.cols, &dy.data, true, &av.data, false, &mut g.data, 1.0));
            }
            &Op::AddRow(a, bias) => {
                self.acc(grads, a, |g| g.add_assign(dy));
                self.acc(grads, bias, |g| {
                    for r in 0..dy.rows {
                        for (gg, d) in g.data.iter_mut().zip(dy.row(r)) {
                            *gg += d;
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |g| g.add_assign(dy));
                self.acc(grads, b, |g| g.add_assign(dy));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.acc(grads, a, |g| {
                    for ((gg, d), o) in g.data.iter_mut().zip(&dy.data).zip(&bv.data) {
                        *gg += d * o;
                    }
                });
                self.acc(grads, b, |g| {
                    for ((gg, d), o) in g.data.iter_mut().zip(&dy.data).zip(&av.data) {
                        *gg += d * o;
                    }
                });
            }
            &Op::Scale(a, c) => self.acc(grads, a, |g| {
                for (gg, d) in g.data.iter_mut().zip(&dy.data) {
                    *gg += c * d;
                }
            }),
            &Op::Sigmoid(a) => self.acc(grads, a, |g| {
                for ((gg, d), s) in g.data.iter_mut().zip(&dy.data).zip(&y.data) {
                    *gg += d * s * (1.0 - s);
                }
            }),
            &Op::Relu(a) => self.acc(grads, a, |g| {
                for ((gg, d), s) in g.data.iter_mut().zip(&dy.data).zip(&y.data) {
                    if *s > 0.0 {
                        *gg += d;
                    }
                }
            }),
            &Op::Tanh(a) => self.acc(grads, a, |g| {
                for ((gg, d), t) in g.data.iter_mut().zip(&dy.data).zip(&y.data) {
                    *gg += d * (1.0 - t * t);
                }
            }),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    self.acc(grads, p, |g| {
                        for r in 0..dy.rows {
                            for (gg, d) in g.row_mut(r).iter_mut().zip(&dy.row(r)[offset..offset + w]) {
                                *gg += d;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |g| {
                        for (gg, d) in g.data.iter_mut().zip(&dy.data[offset..offset + n]) {
                            *gg += d;
                        }
                    });
                    offset += n;
                }
            }
            &Op::SliceCols(a, start) => self.acc(grads, a, |g| {
                for r in 0..dy.rows {
                    for (gg, d) in g.row_mut(r)[start..start + dy.cols].iter_mut().zip(dy.row(r)) {
                        *gg += d;
                    }
                }
            }),
            Op::Gather(a, rows) => self.acc(grads, *a, |g| {
                for (i, &r) in rows.iter().enumerate() {
                    for (gg, d) in g.row_mut(r).iter_mut().zip(dy.row(i)) {
                        *gg += d;
                    }
                }
            }),
            &Op::MeanRows(a) => {
                let n = self.value(a).rows as f64;
                self.acc(grads, a, |g| {
                    for r in 0..g.rows {
                        for (gg, d) in g.row_mut(r).iter_mut().zip(&dy.data) {
                            *gg += d / n;
                        }
                    }
                });
            }
            Op::MaxRows(a, arg) => self.acc(grads, *a, |g| {
                let cols = g.cols;
                for (c, &r) in arg.iter().enumerate() {
                    g.data[r * cols + c] += dy.data[c];
                }
            }),
            &Op::SoftmaxRows(a) => self.acc(grads, a, |g| {
                for r in 0..y.rows {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for ((gg, p), d) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *gg += p * (d - dot);
                    }
                }
            }),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma);
                let (rows, cols) = (xhat.rows, xhat.cols);
                self.acc(grads, *gamma, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g.data[c] += dy.get(r, c) * xhat.get(r, c);
                        }
                    }
                });
                self.acc(grads, *beta, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g.data[c] += dy.get(r, c);
                        }
                    }
                });
                self.acc(grads, *x, |g| {
                    let n = rows as f64;
                    let mut sum_d = vec![0.0; cols];
                    let mut sum_dx = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let dh = dy.get(r, c) * gv.data[c];
                            sum_d[c] += dh;
                            sum_dx[c] += dh * xhat.get(r, c);
                        }
                    }
                    for r in 0..rows {
                        for c in 0..cols {
                            let dh = dy.get(r, c) * gv.data[c];
                            g.data[r * cols + c] +=
                                inv_std[c] / n * (n * dh - sum_d[c] - xhat.get(r, c) * sum_dx[c]);
                        }
                    }
                });
            }
            Op::Normalize { x, gamma, beta, mean, inv_std } => {
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let cols = xv.cols;
                self.acc(grads, *gamma, |g| {
                    for r in 0..xv.rows {
                        for c in 0..cols {
                            g.data[c] += dy.get(r, c) * (xv.get(r, c) - mean[c]) * inv_std[c];
                        }
                    }
                });
                self.acc(grads, *beta, |g| {
                    for r in 0..xv.rows {
                        for c in 0..cols {
                            g.data[c] += dy.get(r, c);
                        }
                    }
                });
                self.acc(grads, *x, |g| {
                    for r in 0..xv.rows {
                        for c in 0..cols {
                            g.data[r * cols + c] += dy.get(r, c) * gv.data[c] * inv_std[c];
                        }
                    }
                });
            }
            &Op::Compat { q, k, e, shape, scale } => {
                let AttnShape { groups, nodes, heads } = shape;
                let (qv, kv) = (self.value(q), self.value(k));
                let dk = qv.cols / heads;
                self.acc(grads, q, |g| {
                    for gi in 0..groups {
                        for i in 0..nodes {
                            let qrow = gi * nodes + i;
                            for j in 0..nodes {
                                let kj = kv.row(gi * nodes + j);
                                let urow = qrow * nodes + j;
                                for m in 0..heads {
                                    let du = dy.data[urow * heads + m] * scale;
                                    let s = m * dk;
                                    for c in s..s + dk {
                                        g.data[qrow * qv.cols + c] += du * kj[c];
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc(grads, k, |g| {
                    for gi in 0..groups {
                        for i in 0..nodes {
                            let qi = qv.row(gi * nodes + i);
                            for j in 0..nodes {
                                let krow = gi * nodes + j;
                                let urow = (gi * nodes + i) * nodes + j;
                                for m in 0..heads {
                                    let du = dy.data[urow * heads + m] * scale;
                                    let s = m * dk;
                                    for c in s..s + dk {
                                        g.data[krow * kv.cols + c] += du * qi[c];
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc(grads, e, |g| {
                    for gi in 0..groups {
                        for i in 0..nodes {
                            for j in 0..nodes {
                                let urow = (gi * nodes + i) * nodes + j;
                                let erow = (gi * nodes + j) * nodes + i;
                                for m in 0..heads {
                                    g.data[erow * heads + m] += dy.data[urow * heads + m];
                                }
                            }
                        }
                    }
                });
            }
            Op::Attend {
                u,
                e,
                v,
                shape,
                weights,
                probs,
                gates,
            } => {
                let AttnShape { groups, nodes, heads } = *shape;
                let vv = self.value(*v);
                let d = vv.cols;
                let dk = d / heads;
                // d(weights)[g,i,j,m] = <dy_i, v_j>_m
                let mut dw = Tensor::zeros(groups * nodes * nodes, heads);
                for gi in 0..groups {
                    for i in 0..nodes {
                        let dyi = dy.row(gi * nodes + i);
                        for j in 0..nodes {
                            let vj = vv.row(gi * nodes + j);
                            let row = (gi * nodes + i) * nodes + j;
                            for m in 0..heads {
                                let s = m * dk;
                                dw.data[row * heads + m] =
                                    dyi[s..s + dk].iter().zip(&vj[s..s + dk]).map(|(a, b)| a * b).sum();
                            }
                        }
                    }
                }
                self.acc(grads, *v, |g| {
                    for gi in 0..groups {
                        for i in 0..nodes {
                            let dyi = dy.row(gi * nodes + i);
                            for j in 0..nodes {
                                let row = (gi * nodes + i) * nodes + j;
                                let vrow = gi * nodes + j;
                                for m in 0..heads {
                                    let w = weights.data[row * heads + m];
                                    let s = m * dk;
                                    for c in s..s + dk {
                                        g.data[vrow * d + c] += w * dyi[c];
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *u, |g| {
                    for gi in 0..groups {
                        for i in 0..nodes {
                            let base = (gi * nodes + i) * nodes;
                            for m in 0..heads {
                                let mut dot = 0.0;
                                for j in 0..nodes {
                                    let idx = (base + j) * heads + m;
                                    dot += probs.data[idx] * dw.data[idx] * gates.data[idx];
                                }
                                for j in 0..nodes {
                                    let idx = (base + j) * heads + m;
                                    g.data[idx] += probs.data[idx] * (dw.data[idx] * gates.data[idx] - dot);
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *e, |g| {
                    for gi in 0..groups {
                        for i in 0..nodes {
                            for j in 0..nodes {
                                let idx = (gi * nodes + i) * nodes + j;
                                let erow = (gi * nodes + j) * nodes + i;
                                for m in 0..heads {
                                    let (p, s) = (probs.data[idx * heads + m], gates.data[idx * heads + m]);
                                    g.data[erow * heads + m] += dw.data[idx * heads + m] * p * s * (1.0 - s);
                                }
                            }
                        }
                    }
                });
            }
            Op::LogSoftmaxPick {
                logits,
                mask,
                index,
                probs,
            } => self.acc(grads, *logits, |g| {
                let d = dy.data[0];
                for (k, gg) in g.data.iter_mut().enumerate() {
                    if !mask[k] {
                        *gg += d * (f64::from(u8::from(k == *index)) - probs[k]);
                    }
                }
            }),
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.acc(grads, v, |g| g.data[0] += w * dy.data[0]);
                }
            }
        }
    }
}

fn affine_cols(xhat: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let mut out = xhat.clone();
    for r in 0..out.rows {
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = *o * gamma.data[c] + beta.data[c];
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Softmax over unmasked entries; masked entries get exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { 0.0 } else { (x - max).exp() })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}
