use serde::{Deserialize, Serialize};

use super::config::{QueryMode, SeqConfig};

/// FLOP totals for one forward pass (1 multiply-accumulate = 2 FLOPs).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    /// Sum over transformer layers.
    pub seq_flops: u64,
    pub per_layer: Vec<u64>,
    pub tokenization: u64,
    pub query: u64,
    pub readout: u64,
}

/// Dense-matmul cost of one layer with `t_in` input rows.
pub fn layer_flops(t_in: u64, d: u64, h: u64, dc: u64, d_ff: u64) -> u64 {
    let kv_down = 2 * t_in * d * dc;
    let q_down = 2 * t_in * d * h * dc;
    let qk = 2 * t_in * h * dc * dc;
    let scores = 2 * t_in * t_in * h * dc;
    let context = 2 * t_in * t_in * h * dc;
    let out = 2 * t_in * h * dc * d;
    let ffn = 4 * t_in * d * d_ff;
    kv_down + q_down + qk + scores + context + out + ffn
}

/// Costs for a sequence of `t` events; `d_content` sizes the tokenizer input.
pub fn flop_count(cfg: &SeqConfig, d_content: usize, t: usize) -> FlopReport {
    let (d, h, dc, dff) = (
        cfg.d_model as u64,
        cfg.heads as u64,
        cfg.latent_dim as u64,
        cfg.d_ff() as u64,
    );
    let per_layer: Vec<u64> = cfg
        .layer_rows(t)
        .iter()
        .map(|&(t_in, _)| layer_flops(t_in as u64, d, h, dc, dff))
        .collect();
    let e = cfg.emb_dim as u64;
    let tin = 5 * e + d_content as u64;
    let tokenization = 2 * t as u64 * (tin * d + d * d);
    let qin = match cfg.mode {
        QueryMode::CandidateAware => 5 * e + d_content as u64 + 2,
        QueryMode::UserOnly => 6 + e,
    };
    let nq = cfg.query_tokens as u64;
    let query = 2 * qin * nq * d;
    let (rin, hid, out, r) = (nq * d, cfg.readout_hidden() as u64, cfg.d_seq() as u64, cfg.lora_rank as u64);
    let per_summary = 2 * (rin * hid + rin * r + r * hid) + 2 * (hid * out + hid * r + r * out);
    FlopReport {
        seq_flops: per_layer.iter().sum(),
        per_layer,
        tokenization,
        query,
        readout: cfg.summaries as u64 * per_summary,
    }
}
