//! Reverse-mode automatic differentiation over a linear record of operations.
//!
//! A [`Tape`] borrows the parameter store, records every primitive applied to
//! [`Var`] handles, and [`Tape::backward`] replays the record in reverse to
//! produce exact gradients for every parameter.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::ops::{self, Mask};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    MaskedScores {
        q: Var,
        k: Var,
        mask: Arc<Mask>,
        scale: f64,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<f64>,
    },
    MaskedSoftmax {
        x: Var,
        mask: Arc<Mask>,
    },
    Silu(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Bce {
        pred: Var,
        target: Vec<f64>,
        eps: f64,
    },
}

struct Node {
    value: Value,
    op: Op,
}

/// Record of a forward computation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; it receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The parameter `id`, recorded once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulBt(a, b)))
    }

    /// `scale * q k^T`, computed only where `mask` allows; other entries are zero.
    pub fn masked_scores(&mut self, q: Var, k: Var, mask: Arc<Mask>, scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        let (m, d, n) = (qv.rows(), qv.cols(), kv.rows());
        if kv.cols() != d || mask.shape() != (m, n) {
            return Err(self.shape_err("masked_scores", q, k));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt_prefix(qv.data(), kv.data(), m, d, n, |i| mask.row_extent(i), &mut out);
        for i in 0..m {
            for j in 0..mask.row_extent(i).min(n) {
                let o = &mut out[i * n + j];
                *o = if mask.allowed(i, j) { *o * scale } else { 0.0 };
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out), Op::MaskedScores { q, k, mask, scale }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b)).map_err(|_| self.shape_err("add", a, b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds the `1 x n` (or length-`n`) row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.numel() != av.cols() {
            return Err(self.shape_err("add_row", a, bias));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    /// Elementwise product of equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.numel() != xv.cols() {
            return Err(self.shape_err("rms_norm", x, gain));
        }
        let inv: Vec<f64> = (0..xv.rows()).map(|i| ops::rms_inverse(xv.row(i), eps)).collect();
        let mut out = xv.clone();
        for (i, r) in inv.iter().enumerate() {
            for (o, g) in out.row_mut(i).iter_mut().zip(gv.data()) {
                *o *= g * r;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv }))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: Arc<Mask>) -> Result<Var> {
        let out = ops::masked_softmax(self.value(x), &mask)?;
        Ok(self.push(out, Op::MaskedSoftmax { x, mask }))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * kernels::sigmoid(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Sigmoid(x))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |p| self.value(*p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                left: xv.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let out = xv.slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: xv.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(xv.rows() * (end - start));
        for i in 0..xv.rows() {
            data.extend_from_slice(&xv.row(i)[start..end]);
        }
        let out = Tensor::matrix(xv.rows(), end - start, data);
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Row lookup (embedding gather).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, c) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(Error::IdOutOfRange {
                    table: "gather",
                    id,
                    size: n,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::matrix(ids.len(), c, data);
        Ok(self.push(out, Op::Gather(table, ids.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`,
    /// with predictions clamped to `[eps, 1 - eps]` (zero gradient when clamped).
    pub fn bce(&mut self, pred: Var, target: &[f64], eps: f64) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.len() {
            return Err(Error::Shape {
                op: "bce",
                left: pv.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let n = target.len().max(1) as f64;
        let loss: f64 = pv
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &y)| bce_term(p, y, eps))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.to_vec(),
                eps,
            },
        ))
    }

    /// Exact reverse-mode gradients of the scalar `loss` for every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut out = Gradients::zeros_like(self.params);
        self.backward_into(loss, &mut out)?;
        Ok(out)
    }

    /// Adds the gradients of `loss` into `out`.
    pub fn backward_into(&self, loss: Var, out: &mut Gradients) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.get_mut(*id).add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(g.data(), bv.data(), m, n, k, &mut da);
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(av.data(), g.data(), m, k, n, &mut db);
                    accumulate(&mut grads, *a, reshape_like(da, av));
                    accumulate(&mut grads, *b, reshape_like(db, bv));
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nn(g.data(), bv.data(), m, n, k, &mut da);
                    let mut db = vec![0.0; n * k];
                    kernels::gemm_tn(g.data(), av.data(), m, n, k, &mut db);
                    accumulate(&mut grads, *a, reshape_like(da, av));
                    accumulate(&mut grads, *b, reshape_like(db, bv));
                }
                Op::MaskedScores { q, k, mask, scale } => {
                    let (qv, kv) = (self.value(*q), self.value(*k));
                    let (m, d, n) = (qv.rows(), qv.cols(), kv.rows());
                    let mut gs = g.into_data();
                    for i in 0..m {
                        for j in 0..n {
                            let s = &mut gs[i * n + j];
                            *s = if mask.allowed(i, j) { *s * scale } else { 0.0 };
                        }
                    }
                    let mut dq = vec![0.0; m * d];
                    kernels::gemm_nn(&gs, kv.data(), m, n, d, &mut dq);
                    let mut dk = vec![0.0; n * d];
                    kernels::gemm_tn(&gs, qv.data(), m, n, d, &mut dk);
                    accumulate(&mut grads, *q, reshape_like(dq, qv));
                    accumulate(&mut grads, *k, reshape_like(dk, kv));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let bv = self.value(*bias);
                    let mut db = vec![0.0; bv.numel()];
                    for i in 0..g.rows() {
                        for (d, x) in db.iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *bias, reshape_like(db, bv));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da: Vec<f64> = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, reshape_like(da, av));
                    accumulate(&mut grads, *b, reshape_like(db, bv));
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::RmsNorm { x, gain, inv } => {
                    let (xv, gv) = (self.value(*x), self.value(*gain));
                    let d = xv.cols();
                    let mut dx = vec![0.0; xv.numel()];
                    let mut dgain = vec![0.0; d];
                    for (i, &r) in inv.iter().enumerate() {
                        let xr = xv.row(i);
                        let gr = g.row(i);
                        // y_j = g_j x_j r, r = (mean(x^2) + eps)^(-1/2)
                        let mut s = 0.0;
                        for j in 0..d {
                            dgain[j] += gr[j] * xr[j] * r;
                            s += gr[j] * gv.data()[j] * xr[j];
                        }
                        let coef = r * r * r * s / d as f64;
                        let dxr = &mut dx[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxr[j] = gr[j] * gv.data()[j] * r - coef * xr[j];
                        }
                    }
                    accumulate(&mut grads, *x, reshape_like(dx, xv));
                    accumulate(&mut grads, *gain, reshape_like(dgain, gv));
                }
                Op::MaskedSoftmax { x, mask } => {
                    let p = self.value(Var(idx));
                    let (m, n) = (p.rows(), p.cols());
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let ext = mask.row_extent(i).min(n);
                        let pr = &p.row(i)[..ext];
                        let gr = &g.row(i)[..ext];
                        let s = kernels::dot(pr, gr);
                        for j in 0..ext {
                            dx[i * n + j] = pr[j] * (gr[j] - s);
                        }
                    }
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, reshape_like(dx, xv));
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let dx = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gi, &v)| {
                            let s = kernels::sigmoid(v);
                            gi * (s + v * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, reshape_like(dx, xv));
                }
                Op::Sigmoid(x) => {
                    let yv = self.value(Var(idx));
                    let dx = g
                        .data()
                        .iter()
                        .zip(yv.data())
                        .map(|(gi, &s)| gi * s * (1.0 - s))
                        .collect();
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, reshape_like(dx, xv));
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let c = pv.cols();
                        let mut dp = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            dp.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        offset += c;
                        accumulate(&mut grads, p, reshape_like(dp, pv));
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.numel();
                        let dp = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        accumulate(&mut grads, p, reshape_like(dp, pv));
                    }
                }
                Op::SliceRows(x, start) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.numel()];
                    dx[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, reshape_like(dx, xv));
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let (c, w) = (xv.cols(), g.cols());
                    let mut dx = vec![0.0; xv.numel()];
                    for i in 0..g.rows() {
                        dx[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *x, reshape_like(dx, xv));
                }
                Op::Reshape(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, reshape_like(g.into_data(), xv));
                }
                Op::Gather(table, ids) => {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    if let Op::Param(id) = &self.nodes[table.0].op {
                        let dt = out.get_mut(*id).data_mut();
                        for (r, &row) in ids.iter().enumerate() {
                            for (d, x) in dt[row * c..(row + 1) * c].iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                        continue;
                    }
                    let mut dt = vec![0.0; tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, x) in dt[id * c..(id + 1) * c].iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *table, reshape_like(dt, tv));
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let s = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), s));
                }
                Op::Bce { pred, target, eps } => {
                    let pv = self.value(*pred);
                    let n = target.len().max(1) as f64;
                    let s = g.data()[0];
                    let dp = pv
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&p, &y)| {
                            if p <= *eps || p >= 1.0 - eps {
                                0.0
                            } else {
                                s * (-y / p + (1.0 - y) / (1.0 - p)) / n
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *pred, reshape_like(dp, pv));
                }
            }
        }
        Ok(())
    }
}

/// Binary cross-entropy of one clamped prediction.
pub fn bce_term(p: f64, y: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn reshape_like(data: Vec<f64>, like: &Tensor) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape matches value")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
