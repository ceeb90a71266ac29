use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Mask, Tape, Tensor, Var};

use super::mla::mla_naive;
use super::weights::{LayerWeights, LoraLinear, LoraMlp};

/// One block: `Z = rms(R + MLA(R))`, `X = rms(Z + FFN(Z))`.
///
/// Only the last `rows_out` rows are computed; they attend causally over all
/// rows of `r`. With `rows_out` equal to the input rows this is the plain
/// self-attention block.
pub fn transformer_layer(
    tape: &mut Tape,
    r: Var,
    w: &LayerWeights,
    rows_out: usize,
    eps: f64,
    probe: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let rows = tape.value(r).rows();
    if rows == 0 || rows_out == 0 || rows_out > rows {
        return Err(Error::Invalid(format!(
            "transformer layer needs 1 <= rows_out ({rows_out}) <= rows ({rows})"
        )));
    }
    let mask = if rows_out == rows {
        Mask::causal(rows)
    } else {
        Mask::causal_suffix(rows_out, rows)
    };
    let a = mla_naive(tape, r, &w.mla, Arc::new(mask), eps, probe)?;
    let res = if rows_out == rows { r } else { tape.slice_rows(r, rows - rows_out, rows)? };
    let z = tape.add(res, a)?;
    let g1 = tape.param(w.norm1);
    let z = tape.rms_norm(z, g1, eps)?;
    let f = ffn(tape, z, w)?;
    let x = tape.add(z, f)?;
    let g2 = tape.param(w.norm2);
    tape.rms_norm(x, g2, eps)
}

/// `silu(z W1) W2`.
pub fn ffn(tape: &mut Tape, z: Var, w: &LayerWeights) -> Result<Var> {
    let w1 = tape.param(w.ffn_w1);
    let w2 = tape.param(w.ffn_w2);
    let h = tape.matmul(z, w1)?;
    let h = tape.silu(h);
    tape.matmul(h, w2)
}

/// Keeps the last `t_next` rows: the most recent events and every query token.
pub fn pyramidal_trim(tape: &mut Tape, x: Var, t_next: usize, n_q: usize) -> Result<Var> {
    let rows = tape.value(x).rows();
    if t_next > rows || t_next < n_q {
        return Err(Error::Invalid(format!(
            "cannot trim {rows} rows to {t_next} with {n_q} query tokens"
        )));
    }
    if t_next == rows {
        return Ok(x);
    }
    tape.slice_rows(x, rows - t_next, rows)
}

fn lora_linear(tape: &mut Tape, x: Var, l: &LoraLinear) -> Result<Var> {
    let w = tape.param(l.w);
    let a = tape.param(l.a);
    let b = tape.param(l.b);
    let bias = tape.param(l.bias);
    let base = tape.matmul(x, w)?;
    let xa = tape.matmul(x, a)?;
    let delta = tape.matmul(xa, b)?;
    let y = tape.add(base, delta)?;
    tape.add_row(y, bias)
}

/// Summary MLP over the flattened query-token rows (`1 x n_q d`).
pub fn readout_lora(tape: &mut Tape, x: Var, mlp: &LoraMlp) -> Result<Var> {
    let h = lora_linear(tape, x, &mlp.l1)?;
    let h = tape.silu(h);
    lora_linear(tape, h, &mlp.l2)
}
