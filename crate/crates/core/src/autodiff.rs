//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records operations define-by-run: every op appends a node
//! holding its kind, input ids and forward value, so input ids are always
//! strictly smaller than the node id and the backward pass is a single
//! reverse sweep. Tapes are rebuilt per training step and confined to one
//! thread; independent tapes may run concurrently.
//!
//! Conventions that matter for gradients:
//! - ReLU's derivative at exactly 0 is 0.
//! - Row normalization floors norms at `NORM_EPS` so gradients stay finite
//!   for near-zero embeddings.
//! - `log_clamped` clamps its argument before the log and passes zero
//!   gradient through clamped entries.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norm floor used by `normalize_rows` (and therefore `cosine_rows`).
pub const NORM_EPS: f64 = 1e-12;

/// Epsilon inside layer normalization's variance denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    MulElem,
    Relu,
    Exp,
    Affine { mul: f64, add: f64 },
    LogClamped { eps: f64 },
    Matmul,
    Transpose,
    Reshape,
    RowSoftmax,
    RowLogSumExp,
    LayerNorm { eps: f64 },
    NormalizeRows { eps: f64 },
    CenterRows,
    MeanRows,
    WeightedSumRows,
    RowSum,
    MeanAll,
    TakeDiag,
    AddRowBias,
    SliceRows { start: usize },
    SliceCols { start: usize },
    ConcatRows,
    ConcatCols,
    MulScalar,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to node `id`, if any flowed there.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { op, inputs, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients accumulate here.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn shape_err(&self, op: &str, detail: String) -> Error {
        Error::InvalidShape(format!("{op}: {detail}"))
    }

    fn t(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(self.shape_err("add", format!("{:?} vs {:?}", self.t(a).shape(), self.t(b).shape())));
        }
        let v = self.t(a).zip_map(self.t(b), |x, y| x + y);
        Ok(self.push(Op::Add, vec![a.0, b.0], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(self.shape_err("sub", format!("{:?} vs {:?}", self.t(a).shape(), self.t(b).shape())));
        }
        let v = self.t(a).zip_map(self.t(b), |x, y| x - y);
        Ok(self.push(Op::Sub, vec![a.0, b.0], v))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(self.shape_err("mul_elem", format!("{:?} vs {:?}", self.t(a).shape(), self.t(b).shape())));
        }
        let v = self.t(a).zip_map(self.t(b), |x, y| x * y);
        Ok(self.push(Op::MulElem, vec![a.0, b.0], v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.t(a).map(|x| x.max(0.0));
        Ok(self.push(Op::Relu, vec![a.0], v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.t(a).map(f64::exp);
        Ok(self.push(Op::Exp, vec![a.0], v))
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let v = self.t(a).map(|x| mul * x + add);
        Ok(self.push(Op::Affine { mul, add }, vec![a.0], v))
    }

    /// Elementwise `x * c`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.affine(a, c, 0.0)
    }

    /// Elementwise `ln(max(x, eps))`; clamped entries get zero gradient.
    pub fn log_clamped(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let v = self.t(a).map(|x| x.max(eps).ln());
        Ok(self.push(Op::LogClamped { eps }, vec![a.0], v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.cols() != tb.rows() {
            return Err(self.shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let v = ta.matmul(tb);
        Ok(self.push(Op::Matmul, vec![a.0, b.0], v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.t(a).transpose();
        Ok(self.push(Op::Transpose, vec![a.0], v))
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let ta = self.t(a);
        if ta.len() != rows * cols {
            return Err(self.shape_err("reshape", format!("{:?} into {rows}x{cols}", ta.shape())));
        }
        let v = Tensor::from_vec(rows, cols, ta.data().to_vec());
        Ok(self.push(Op::Reshape, vec![a.0], v))
    }

    /// Row-wise softmax with max-shift stabilization.
    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.t(a);
        let (r, c) = ta.shape();
        let mut v = Tensor::zeros(r, c);
        for i in 0..r {
            let row = ta.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let out = v.row_mut(i);
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(Op::RowSoftmax, vec![a.0], v))
    }

    /// Row-wise `log(sum(exp(x)))`, shape (r, 1).
    pub fn row_logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.t(a);
        let (r, _) = ta.shape();
        let mut v = Tensor::zeros(r, 1);
        for i in 0..r {
            let row = ta.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            v.set(i, 0, max + sum.ln());
        }
        Ok(self.push(Op::RowLogSumExp, vec![a.0], v))
    }

    /// Row-wise layer normalization with learned gain and bias (1 x cols).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (self.t(x), self.t(gain), self.t(bias));
        let c = tx.cols();
        if tg.shape() != (1, c) || tb.shape() != (1, c) {
            return Err(self.shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let eps = LAYER_NORM_EPS;
        let r = tx.rows();
        let mut v = Tensor::zeros(r, c);
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let out = v.row_mut(i);
            for j in 0..c {
                out[j] = (row[j] - mean) * inv * tg.get(0, j) + tb.get(0, j);
            }
        }
        Ok(self.push(Op::LayerNorm { eps }, vec![x.0, gain.0, bias.0], v))
    }

    /// Rows scaled to unit L2 norm, with norms floored at `NORM_EPS`.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.t(a);
        let (r, c) = ta.shape();
        let mut v = Tensor::zeros(r, c);
        for i in 0..r {
            let row = ta.row(i);
            let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            let out = v.row_mut(i);
            for j in 0..c {
                out[j] = row[j] / norm;
            }
        }
        Ok(self.push(Op::NormalizeRows { eps: NORM_EPS }, vec![a.0], v))
    }

    /// Subtracts each row's mean from the row.
    pub fn center_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.t(a);
        let (r, c) = ta.shape();
        let mut v = Tensor::zeros(r, c);
        for i in 0..r {
            let row = ta.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let out = v.row_mut(i);
            for j in 0..c {
                out[j] = row[j] - mean;
            }
        }
        Ok(self.push(Op::CenterRows, vec![a.0], v))
    }

    /// Mean over rows, shape (1, cols).
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.t(a);
        let (r, c) = ta.shape();
        let mut v = Tensor::zeros(1, c);
        for i in 0..r {
            let row = ta.row(i);
            let out = v.row_mut(0);
            for j in 0..c {
                out[j] += row[j] / r as f64;
            }
        }
        Ok(self.push(Op::MeanRows, vec![a.0], v))
    }

    /// Convex (or arbitrary) combination of rows: `w (1 x m) * x (m x d)`.
    pub fn weighted_sum_rows(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (tw, tx) = (self.t(w), self.t(x));
        if tw.rows() != 1 || tw.cols() != tx.rows() {
            return Err(self.shape_err(
                "weighted_sum_rows",
                format!("w {:?} vs rows {:?}", tw.shape(), tx.shape()),
            ));
        }
        let v = tw.matmul(tx);
        Ok(self.push(Op::WeightedSumRows, vec![w.0, x.0], v))
    }

    /// Row sums, shape (rows, 1).
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.t(a);
        let r = ta.rows();
        let mut v = Tensor::zeros(r, 1);
        for i in 0..r {
            v.set(i, 0, ta.row(i).iter().sum());
        }
        Ok(self.push(Op::RowSum, vec![a.0], v))
    }

    /// Mean of all entries, shape (1, 1).
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.t(a);
        let v = Tensor::scalar(ta.data().iter().sum::<f64>() / ta.len() as f64);
        Ok(self.push(Op::MeanAll, vec![a.0], v))
    }

    /// Diagonal of a square matrix, shape (n, 1).
    pub fn take_diag(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.t(a);
        if ta.rows() != ta.cols() {
            return Err(self.shape_err("take_diag", format!("{:?} not square", ta.shape())));
        }
        let n = ta.rows();
        let mut v = Tensor::zeros(n, 1);
        for i in 0..n {
            v.set(i, 0, ta.get(i, i));
        }
        Ok(self.push(Op::TakeDiag, vec![a.0], v))
    }

    /// Adds a (1 x cols) bias row to every row of `a`.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.t(a), self.t(bias));
        if tb.shape() != (1, ta.cols()) {
            return Err(self.shape_err(
                "add_row_bias",
                format!("{:?} + bias {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (r, c) = ta.shape();
        let mut v = Tensor::zeros(r, c);
        for i in 0..r {
            let row = ta.row(i);
            let out = v.row_mut(i);
            for j in 0..c {
                out[j] = row[j] + tb.get(0, j);
            }
        }
        Ok(self.push(Op::AddRowBias, vec![a.0, bias.0], v))
    }

    /// Rows `start .. start + len` of `a`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.t(a);
        if start + len > ta.rows() || len == 0 {
            return Err(self.shape_err(
                "slice_rows",
                format!("[{start}, {start}+{len}) of {:?}", ta.shape()),
            ));
        }
        let c = ta.cols();
        let data = ta.data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Op::SliceRows { start }, vec![a.0], Tensor::from_vec(len, c, data)))
    }

    /// Columns `start .. start + len` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.t(a);
        if start + len > ta.cols() || len == 0 {
            return Err(self.shape_err(
                "slice_cols",
                format!("[{start}, {start}+{len}) of {:?}", ta.shape()),
            ));
        }
        let r = ta.rows();
        let mut v = Tensor::zeros(r, len);
        for i in 0..r {
            let row = ta.row(i);
            v.row_mut(i).copy_from_slice(&row[start..start + len]);
        }
        Ok(self.push(Op::SliceCols { start }, vec![a.0], v))
    }

    /// Stacks inputs vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_rows", "no inputs".into()));
        }
        let c = self.t(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            if self.t(p).cols() != c {
                return Err(self.shape_err("concat_rows", "column mismatch".into()));
            }
            rows += self.t(p).rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.t(p).data());
        }
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Op::ConcatRows, ids, Tensor::from_vec(rows, c, data)))
    }

    /// Stacks inputs horizontally; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_cols", "no inputs".into()));
        }
        let r = self.t(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.t(p).rows() != r {
                return Err(self.shape_err("concat_cols", "row mismatch".into()));
            }
            cols += self.t(p).cols();
        }
        let mut v = Tensor::zeros(r, cols);
        for i in 0..r {
            let out = v.row_mut(i);
            let mut off = 0;
            for &p in parts {
                let pr = self.nodes[p.0].value.row(i);
                out[off..off + pr.len()].copy_from_slice(pr);
                off += pr.len();
            }
        }
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Op::ConcatCols, ids, v))
    }

    /// Multiplies every entry of `a` by the (1 x 1) node `s`; gradients flow
    /// to both.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.t(s).shape() != (1, 1) {
            return Err(self.shape_err("mul_scalar", format!("scalar is {:?}", self.t(s).shape())));
        }
        let sv = self.t(s).item();
        let v = self.t(a).map(|x| x * sv);
        Ok(self.push(Op::MulScalar, vec![a.0, s.0], v))
    }

    /// Row-wise cosine similarity between matching rows of `a` and `b`,
    /// shape (rows, 1). Composite of `normalize_rows`, `mul_elem` and
    /// `row_sum`, so norms are floored at `NORM_EPS`.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(self.shape_err(
                "cosine_rows",
                format!("{:?} vs {:?}", self.t(a).shape(), self.t(b).shape()),
            ));
        }
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let prod = self.mul_elem(na, nb)?;
        self.row_sum(prod)
    }

    /// Reverse sweep from a scalar loss node. Gradients are accumulated in
    /// reverse creation order, visiting each node exactly once, so identical
    /// tapes yield bitwise-identical gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.t(loss).shape() != (1, 1) {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss node, got {:?}",
                self.t(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            let ins = &node.inputs;
            let mut acc = |idx: usize, contribution: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[idx].needs_grad {
                    return;
                }
                match &mut grads[idx] {
                    Some(existing) => existing.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add => {
                    acc(ins[0], g.clone(), &mut grads);
                    acc(ins[1], g, &mut grads);
                }
                Op::Sub => {
                    acc(ins[0], g.clone(), &mut grads);
                    acc(ins[1], g.map(|v| -v), &mut grads);
                }
                Op::MulElem => {
                    let (a, b) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                    acc(ins[0], g.zip_map(b, |gv, bv| gv * bv), &mut grads);
                    acc(ins[1], g.zip_map(a, |gv, av| gv * av), &mut grads);
                }
                Op::Relu => {
                    let x = &self.nodes[ins[0]].value;
                    acc(ins[0], g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }), &mut grads);
                }
                Op::Exp => {
                    acc(ins[0], g.zip_map(&node.value, |gv, yv| gv * yv), &mut grads);
                }
                Op::Affine { mul, .. } => {
                    let m = *mul;
                    acc(ins[0], g.map(|v| v * m), &mut grads);
                }
                Op::LogClamped { eps } => {
                    let e = *eps;
                    let x = &self.nodes[ins[0]].value;
                    acc(
                        ins[0],
                        g.zip_map(x, |gv, xv| if xv > e { gv / xv } else { 0.0 }),
                        &mut grads,
                    );
                }
                Op::Matmul => {
                    let (a, b) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                    if self.nodes[ins[0]].needs_grad {
                        acc(ins[0], g.matmul_nt(b), &mut grads);
                    }
                    if self.nodes[ins[1]].needs_grad {
                        acc(ins[1], a.matmul_tn(&g), &mut grads);
                    }
                }
                Op::Transpose => {
                    acc(ins[0], g.transpose(), &mut grads);
                }
                Op::Reshape => {
                    let (r, c) = self.nodes[ins[0]].value.shape();
                    acc(ins[0], Tensor::from_vec(r, c, g.data().to_vec()), &mut grads);
                }
                Op::RowSoftmax => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut gx = Tensor::zeros(r, c);
                    for row in 0..r {
                        let yr = y.row(row);
                        let gr = g.row(row);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                        let out = gx.row_mut(row);
                        for j in 0..c {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(ins[0], gx, &mut grads);
                }
                Op::RowLogSumExp => {
                    let x = &self.nodes[ins[0]].value;
                    let y = &node.value;
                    let (r, c) = x.shape();
                    let mut gx = Tensor::zeros(r, c);
                    for row in 0..r {
                        let xr = x.row(row);
                        let lse = y.get(row, 0);
                        let gr = g.get(row, 0);
                        let out = gx.row_mut(row);
                        for j in 0..c {
                            out[j] = gr * (xr[j] - lse).exp();
                        }
                    }
                    acc(ins[0], gx, &mut grads);
                }
                Op::LayerNorm { eps } => {
                    let x = &self.nodes[ins[0]].value;
                    let gain = &self.nodes[ins[1]].value;
                    let (r, c) = x.shape();
                    let mut gx = Tensor::zeros(r, c);
                    let mut ggain = Tensor::zeros(1, c);
                    let mut gbias = Tensor::zeros(1, c);
                    for row in 0..r {
                        let xr = x.row(row);
                        let gr = g.row(row);
                        let mean = xr.iter().sum::<f64>() / c as f64;
                        let var = xr.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        // h = g .* gain; dx = inv*(h - mean(h) - xhat*mean(h.*xhat))
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * inv;
                            let h = gr[j] * gain.get(0, j);
                            mean_h += h;
                            mean_hx += h * xhat;
                            let gg = ggain.get(0, j) + gr[j] * xhat;
                            ggain.set(0, j, gg);
                            let gb = gbias.get(0, j) + gr[j];
                            gbias.set(0, j, gb);
                        }
                        mean_h /= c as f64;
                        mean_hx /= c as f64;
                        let out = gx.row_mut(row);
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * inv;
                            let h = gr[j] * gain.get(0, j);
                            out[j] = inv * (h - mean_h - xhat * mean_hx);
                        }
                    }
                    acc(ins[0], gx, &mut grads);
                    acc(ins[1], ggain, &mut grads);
                    acc(ins[2], gbias, &mut grads);
                }
                Op::NormalizeRows { eps } => {
                    let x = &self.nodes[ins[0]].value;
                    let y = &node.value;
                    let (r, c) = x.shape();
                    let mut gx = Tensor::zeros(r, c);
                    for row in 0..r {
                        let xr = x.row(row);
                        let norm = xr.iter().map(|&v| v * v).sum::<f64>().sqrt();
                        let out = gx.row_mut(row);
                        if norm > *eps {
                            let yr = y.row(row);
                            let gr = g.row(row);
                            let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                            for j in 0..c {
                                out[j] = (gr[j] - yr[j] * dot) / norm;
                            }
                        } else {
                            // Clamped region: y = x / eps exactly.
                            let gr = g.row(row);
                            for j in 0..c {
                                out[j] = gr[j] / eps;
                            }
                        }
                    }
                    acc(ins[0], gx, &mut grads);
                }
                Op::CenterRows => {
                    let (r, c) = node.value.shape();
                    let mut gx = Tensor::zeros(r, c);
                    for row in 0..r {
                        let gr = g.row(row);
                        let mean = gr.iter().sum::<f64>() / c as f64;
                        let out = gx.row_mut(row);
                        for j in 0..c {
                            out[j] = gr[j] - mean;
                        }
                    }
                    acc(ins[0], gx, &mut grads);
                }
                Op::MeanRows => {
                    let x = &self.nodes[ins[0]].value;
                    let (r, c) = x.shape();
                    let mut gx = Tensor::zeros(r, c);
                    for row in 0..r {
                        let out = gx.row_mut(row);
                        for j in 0..c {
                            out[j] = g.get(0, j) / r as f64;
                        }
                    }
                    acc(ins[0], gx, &mut grads);
                }
                Op::WeightedSumRows => {
                    let (w, x) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                    if self.nodes[ins[0]].needs_grad {
                        acc(ins[0], g.matmul_nt(x), &mut grads);
                    }
                    if self.nodes[ins[1]].needs_grad {
                        acc(ins[1], w.transpose().matmul(&g), &mut grads);
                    }
                }
                Op::RowSum => {
                    let x = &self.nodes[ins[0]].value;
                    let (r, c) = x.shape();
                    let mut gx = Tensor::zeros(r, c);
                    for row in 0..r {
                        let gv = g.get(row, 0);
                        let out = gx.row_mut(row);
                        for j in 0..c {
                            out[j] = gv;
                        }
                    }
                    acc(ins[0], gx, &mut grads);
                }
                Op::MeanAll => {
                    let x = &self.nodes[ins[0]].value;
                    let (r, c) = x.shape();
                    let gv = g.item() / (r * c) as f64;
                    acc(ins[0], Tensor::from_vec(r, c, vec![gv; r * c]), &mut grads);
                }
                Op::TakeDiag => {
                    let n = self.nodes[ins[0]].value.rows();
                    let mut gx = Tensor::zeros(n, n);
                    for k in 0..n {
                        gx.set(k, k, g.get(k, 0));
                    }
                    acc(ins[0], gx, &mut grads);
                }
                Op::AddRowBias => {
                    let (r, c) = node.value.shape();
                    acc(ins[0], g.clone(), &mut grads);
                    if self.nodes[ins[1]].needs_grad {
                        let mut gb = Tensor::zeros(1, c);
                        for row in 0..r {
                            let gr = g.row(row);
                            for j in 0..c {
                                *gb.row_mut(0).get_mut(j).unwrap() += gr[j];
                            }
                        }
                        acc(ins[1], gb, &mut grads);
                    }
                }
                Op::SliceRows { start } => {
                    let x = &self.nodes[ins[0]].value;
                    let mut gx = Tensor::zeros(x.rows(), x.cols());
                    for row in 0..node.value.rows() {
                        gx.row_mut(start + row).copy_from_slice(g.row(row));
                    }
                    acc(ins[0], gx, &mut grads);
                }
                Op::SliceCols { start } => {
                    let x = &self.nodes[ins[0]].value;
                    let mut gx = Tensor::zeros(x.rows(), x.cols());
                    let len = node.value.cols();
                    for row in 0..x.rows() {
                        gx.row_mut(row)[*start..*start + len].copy_from_slice(g.row(row));
                    }
                    acc(ins[0], gx, &mut grads);
                }
                Op::ConcatRows => {
                    let mut off = 0;
                    for &idx in ins {
                        let part = &self.nodes[idx].value;
                        let (pr, pc) = part.shape();
                        if self.nodes[idx].needs_grad {
                            let data = g.data()[off * pc..(off + pr) * pc].to_vec();
                            acc(idx, Tensor::from_vec(pr, pc, data), &mut grads);
                        }
                        off += pr;
                    }
                }
                Op::ConcatCols => {
                    let mut off = 0;
                    for &idx in ins {
                        let part = &self.nodes[idx].value;
                        let (pr, pc) = part.shape();
                        if self.nodes[idx].needs_grad {
                            let mut gp = Tensor::zeros(pr, pc);
                            for row in 0..pr {
                                gp.row_mut(row).copy_from_slice(&g.row(row)[off..off + pc]);
                            }
                            acc(idx, gp, &mut grads);
                        }
                        off += pc;
                    }
                }
                Op::MulScalar => {
                    let (a, s) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                    let sv = s.item();
                    acc(ins[0], g.map(|v| v * sv), &mut grads);
                    if self.nodes[ins[1]].needs_grad {
                        let dot: f64 = g.data().iter().zip(a.data().iter()).map(|(&gv, &av)| gv * av).sum();
                        acc(ins[1], Tensor::scalar(dot), &mut grads);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Compares the tape's analytic gradient against central finite differences.
///
/// `build` must construct a scalar loss from the single parameter leaf it is
/// given; it is re-invoked for every probe, so it has to be a pure function
/// of the leaf value. Returns the maximum over coordinates of
/// `|analytic - central| / max(1, |analytic|, |central|)`.
pub fn grad_check<F>(build: F, params: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidInput(format!("grad_check step h={h} outside [1e-7, 1e-3]")));
    }
    params.check_finite("grad_check params")?;

    let eval = |t: &Tensor, want_grads: bool| -> Result<(f64, Option<Tensor>)> {
        let mut tape = Tape::new();
        let p = tape.param(t.clone());
        let loss = build(&mut tape, p)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::ProbeFailure(format!("loss is {value} at probe point")));
        }
        if want_grads {
            let grads = tape.backward(loss)?;
            let g = grads
                .get(p)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
            Ok((value, Some(g)))
        } else {
            Ok((value, None))
        }
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.unwrap();

    let mut max_rel = 0.0f64;
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig - h;
        let (fm, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig;
        let central = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / 1.0f64.max(a.abs()).max(central.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
