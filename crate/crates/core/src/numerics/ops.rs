//! Forward-only primitives shared by the tape and by straight-line code.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Boolean attention mask; `true` marks a position that may be attended.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    /// Square lower-triangular mask: row `i` sees columns `0..=i`.
    Causal(usize),
    /// The last `rows` rows of a causal mask over `cols` positions.
    CausalSuffix { rows: usize, cols: usize },
    Dense {
        rows: usize,
        cols: usize,
        allowed: Vec<bool>,
    },
}

impl Mask {
    pub fn causal(n: usize) -> Self {
        Mask::Causal(n)
    }

    /// Causal mask for the trailing `rows` query positions over `cols` keys.
    pub fn causal_suffix(rows: usize, cols: usize) -> Self {
        assert!(rows <= cols, "suffix longer than the sequence");
        Mask::CausalSuffix { rows, cols }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Mask::Dense {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Mask::Dense {
            rows,
            cols,
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Mask::Causal(n) => (*n, *n),
            Mask::CausalSuffix { rows, cols } => (*rows, *cols),
            Mask::Dense { rows, cols, .. } => (*rows, *cols),
        }
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::Causal(_) => j <= i,
            Mask::CausalSuffix { rows, cols } => j + rows <= i + cols,
            Mask::Dense { cols, allowed, .. } => allowed[i * cols + j],
        }
    }

    /// Exclusive upper bound on allowed columns of row `i`.
    pub fn row_extent(&self, i: usize) -> usize {
        match self {
            Mask::Causal(_) => i + 1,
            Mask::CausalSuffix { rows, cols } => i + 1 + cols - rows,
            Mask::Dense { cols, allowed, .. } => allowed[i * cols..(i + 1) * cols]
                .iter()
                .rposition(|&a| a)
                .map_or(0, |p| p + 1),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `C = A B` for `A: m x k`, `B: k x n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 || b.shape().len() != 2 {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(a.data(), b.data(), m, k, n, &mut out);
    Ok(Tensor::matrix(m, n, out))
}

/// `C = A B^T` for `A: m x k`, `B: n x k`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(shape_err("matmul_bt", a, b));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nt(a.data(), b.data(), m, k, n, &mut out);
    Ok(Tensor::matrix(m, n, out))
}

/// Row-wise softmax over unmasked entries; masked entries are exactly zero.
pub fn masked_softmax(scores: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (rows, cols) = (scores.rows(), scores.cols());
    if mask.shape() != (rows, cols) {
        let (mr, mc) = mask.shape();
        return Err(Error::Shape {
            op: "masked_softmax",
            left: scores.shape().to_vec(),
            right: vec![mr, mc],
        });
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        softmax_row(scores.row(i), mask, i, &mut out[i * cols..(i + 1) * cols])?;
    }
    Ok(Tensor::matrix(rows, cols, out))
}

pub(crate) fn softmax_row(row: &[f64], mask: &Mask, i: usize, out: &mut [f64]) -> Result<()> {
    let extent = mask.row_extent(i);
    let mut max = f64::NEG_INFINITY;
    for (j, &s) in row[..extent].iter().enumerate() {
        if mask.allowed(i, j) && s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::FullyMaskedRow { row: i });
    }
    let mut sum = 0.0;
    for (j, &s) in row[..extent].iter().enumerate() {
        if mask.allowed(i, j) {
            let e = (s - max).exp();
            out[j] = e;
            sum += e;
        }
    }
    let inv = 1.0 / sum;
    for o in out[..extent].iter_mut() {
        *o *= inv;
    }
    Ok(())
}

/// `y = gain * x / sqrt(mean(x^2) + eps)` over each trailing slice.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gain.numel() != d {
        return Err(shape_err("rms_norm", x, gain));
    }
    let mut out = x.clone();
    for i in 0..x.rows() {
        let r = rms_inverse(x.row(i), eps);
        for (o, g) in out.row_mut(i).iter_mut().zip(gain.data()) {
            *o *= g * r;
        }
    }
    Ok(out)
}

/// `1 / sqrt(mean(x^2) + eps)`; zero for an all-zero row with `eps = 0`.
pub(crate) fn rms_inverse(row: &[f64], eps: f64) -> f64 {
    let ms = kernels::dot(row, row) / row.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        1.0 / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec())
    }

    #[test]
    fn matmul_examples() {
        let b = t(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let a = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(matmul(&z, &b).unwrap(), z);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let p = masked_softmax(&t(1, 3, &[0.0; 3]), &Mask::all(1, 3)).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let single = Mask::from_fn(1, 2, |_, j| j == 0);
        let p = masked_softmax(&t(1, 2, &[3.0, 100.0]), &single).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
        let p = masked_softmax(&t(1, 2, &[0.0, 2f64.ln()]), &Mask::all(1, 2)).unwrap();
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_reported() {
        let m = Mask::from_fn(2, 2, |i, _| i == 0);
        match masked_softmax(&Tensor::zeros(&[2, 2]), &m) {
            Err(Error::FullyMaskedRow { row }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rms_norm_examples() {
        let ones = Tensor::full(&[4], 1.0);
        let y = rms_norm(&Tensor::row_vector(vec![2.0; 4]), &ones, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0; 4]);
        let y = rms_norm(&Tensor::zeros(&[1, 4]), &ones, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
        let y = rms_norm(&Tensor::row_vector(vec![3.0, 4.0]), &Tensor::full(&[2], 1.0), 0.0)
            .unwrap();
        assert!((y.data()[0] - 0.84853).abs() < 1e-5);
        assert!((y.data()[1] - 1.13137).abs() < 1e-5);
    }
}
