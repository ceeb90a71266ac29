use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{masked_softmax, matmul, matmul_bt, rms_norm, Mask, ParamStore, Tape, Tensor, Var};

use super::weights::{MlaValues, MlaWeights};

/// Attention weights with both up-projections folded into the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedMla {
    pub w_q_down: Tensor,
    pub q_gain: Tensor,
    pub w_kv_down: Tensor,
    pub kv_gain: Tensor,
    /// Per head `W_q_up W_k_up^T`, `d_c x d_c`.
    pub w_qk: Vec<Tensor>,
    /// Per head `W_v_up W_out[head rows]`, `d_c x d`.
    pub w_vo: Vec<Tensor>,
}

/// Multi-head latent attention over the rows of `x`.
///
/// Queries are the last `mask.rows` rows of `x`; keys and values are all rows.
/// When `probe` is given, each head's attention matrix is appended to it.
pub fn mla_naive(
    tape: &mut Tape,
    x: Var,
    w: &MlaWeights,
    mask: Arc<Mask>,
    eps: f64,
    mut probe: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let n = tape.value(x).rows();
    let (m, cols) = mask.shape();
    if cols != n || m > n {
        return Err(Error::Shape {
            op: "mla_naive",
            left: tape.value(x).shape().to_vec(),
            right: vec![m, cols],
        });
    }
    let xq = if m == n { x } else { tape.slice_rows(x, n - m, n)? };
    let wqd = tape.param(w.w_q_down);
    let gq = tape.param(w.q_gain);
    let wkvd = tape.param(w.w_kv_down);
    let gkv = tape.param(w.kv_gain);
    let cq = tape.matmul(xq, wqd)?;
    let cq = tape.rms_norm(cq, gq, eps)?;
    let ckv = tape.matmul(x, wkvd)?;
    let ckv = tape.rms_norm(ckv, gkv, eps)?;
    let dc = tape.value(ckv).cols();
    let scale = 1.0 / (dc as f64).sqrt();
    let mut heads = Vec::with_capacity(w.heads());
    for h in 0..w.heads() {
        let qh = tape.slice_cols(cq, h * dc, (h + 1) * dc)?;
        let wq = tape.param(w.w_q_up[h]);
        let wk = tape.param(w.w_k_up[h]);
        let wv = tape.param(w.w_v_up[h]);
        let q = tape.matmul(qh, wq)?;
        let k = tape.matmul(ckv, wk)?;
        let v = tape.matmul(ckv, wv)?;
        let s = tape.masked_scores(q, k, mask.clone(), scale)?;
        let p = tape.masked_softmax(s, mask.clone())?;
        if let Some(store) = probe.as_deref_mut() {
            store.push(tape.value(p).clone());
        }
        heads.push(tape.matmul(p, v)?);
    }
    let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let wo = tape.param(w.w_out);
    tape.matmul(o, wo)
}

/// Runs [`mla_naive`] on plain tensors.
pub fn mla_naive_forward(store: &ParamStore, w: &MlaWeights, x: &Tensor, mask: &Mask, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new(store);
    let xv = tape.constant(x.clone());
    let out = mla_naive(&mut tape, xv, w, Arc::new(mask.clone()), eps, None)?;
    Ok(tape.value(out).clone())
}

/// Folds the per-head up-projections into latent-space matrices.
pub fn absorb_weights(v: &MlaValues) -> Result<FusedMla> {
    let dc = v.kv_gain.numel();
    let mut w_qk = Vec::with_capacity(v.w_q_up.len());
    let mut w_vo = Vec::with_capacity(v.w_q_up.len());
    for h in 0..v.w_q_up.len() {
        w_qk.push(matmul_bt(&v.w_q_up[h], &v.w_k_up[h])?);
        let out_rows = v.w_out.slice_rows(h * dc, (h + 1) * dc);
        w_vo.push(matmul(&v.w_v_up[h], &out_rows)?);
    }
    Ok(FusedMla {
        w_q_down: v.w_q_down.clone(),
        q_gain: v.q_gain.clone(),
        w_kv_down: v.w_kv_down.clone(),
        kv_gain: v.kv_gain.clone(),
        w_qk,
        w_vo,
    })
}

/// Latent-space attention: scores `q_lat W_qk kv_lat^T / sqrt(d_c)` and
/// output `sum_h P_h kv_lat W_vo[h]`. Queries are the last `mask.rows` rows.
pub fn mla_absorbed(x: &Tensor, f: &FusedMla, mask: &Mask, eps: f64) -> Result<Tensor> {
    let n = x.rows();
    let (m, cols) = mask.shape();
    if cols != n || m > n {
        return Err(Error::Shape {
            op: "mla_absorbed",
            left: x.shape().to_vec(),
            right: vec![m, cols],
        });
    }
    let xq = x.slice_rows(n - m, n);
    let cq = rms_norm(&matmul(&xq, &f.w_q_down)?, &f.q_gain, eps)?;
    let ckv = rms_norm(&matmul(x, &f.w_kv_down)?, &f.kv_gain, eps)?;
    let dc = ckv.cols();
    let scale = 1.0 / (dc as f64).sqrt();
    let d = f.w_vo.first().map_or(0, |t| t.cols());
    let mut out = Tensor::zeros(&[m, d]);
    for (h, (wqk, wvo)) in f.w_qk.iter().zip(&f.w_vo).enumerate() {
        let mut qh = Tensor::zeros(&[m, dc]);
        for i in 0..m {
            qh.row_mut(i).copy_from_slice(&cq.row(i)[h * dc..(h + 1) * dc]);
        }
        let s = matmul_bt(&matmul(&qh, wqk)?, &ckv)?.scale(scale);
        let p = masked_softmax(&s, mask)?;
        let ctx = matmul(&p, &ckv)?;
        out.add_assign(&matmul(&ctx, wvo)?);
    }
    Ok(out)
}
