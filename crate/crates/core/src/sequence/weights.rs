use crate::events::{Vocab, NUM_CROSS_FEATURES};
use crate::numerics::{ParamId, ParamKind, ParamStore, Tensor};

use super::config::{QueryMode, SeqConfig};

/// Hour-of-day buckets of the `E_time` table.
pub const HOURS_PER_DAY: usize = 24;
/// Hand-built user-level features in user-only query mode.
pub const USER_FEATURES: usize = 6;

#[derive(Clone, Debug)]
pub struct TokenizerWeights {
    pub e_type: ParamId,
    pub e_item: ParamId,
    pub e_surface: ParamId,
    pub e_time: ParamId,
    pub e_meta: ParamId,
    /// Added to the meta embedding when the content slot is empty.
    pub e_missing: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct QueryWeights {
    /// Present in candidate-aware mode only.
    pub e_advertiser: Option<ParamId>,
    pub e_surface: Option<ParamId>,
    pub e_device: Option<ParamId>,
    pub e_hour: ParamId,
    pub proj: ParamId,
    pub seeds: ParamId,
}

#[derive(Clone, Debug)]
pub struct MlaWeights {
    pub w_q_down: ParamId,
    pub q_gain: ParamId,
    pub w_kv_down: ParamId,
    pub kv_gain: ParamId,
    pub w_q_up: Vec<ParamId>,
    pub w_k_up: Vec<ParamId>,
    pub w_v_up: Vec<ParamId>,
    pub w_out: ParamId,
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub mla: MlaWeights,
    pub norm1: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_w2: ParamId,
    pub norm2: ParamId,
}

/// `x (W + A B) + bias`.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub w: ParamId,
    pub bias: ParamId,
    pub a: ParamId,
    pub b: ParamId,
}

/// Two-layer readout MLP with adapted linear layers.
#[derive(Clone, Debug)]
pub struct LoraMlp {
    pub l1: LoraLinear,
    pub l2: LoraLinear,
}

#[derive(Clone, Debug)]
pub struct SeqWeights {
    pub tokenizer: TokenizerWeights,
    pub query: QueryWeights,
    pub layers: Vec<LayerWeights>,
    /// One adapted MLP per summary; base matrices are shared.
    pub readout: Vec<LoraMlp>,
}

/// Width of the concatenated input to the action MLP.
pub fn token_input_dim(cfg: &SeqConfig, vocab: &Vocab) -> usize {
    5 * cfg.emb_dim + vocab.d_content
}

/// Width of the query feature vector before projection.
pub fn query_input_dim(cfg: &SeqConfig, vocab: &Vocab) -> usize {
    match cfg.mode {
        QueryMode::CandidateAware => 5 * cfg.emb_dim + vocab.d_content + NUM_CROSS_FEATURES,
        QueryMode::UserOnly => USER_FEATURES + cfg.emb_dim,
    }
}

impl MlaWeights {
    pub fn register(store: &mut ParamStore, p: &str, d: usize, h: usize, dc: usize) -> Self {
        let m = ParamKind::Matrix;
        let per_head = |store: &mut ParamStore, name: &str| {
            (0..h)
                .map(|i| store.register(format!("{p}.{name}.{i}"), m, &[dc, dc]))
                .collect()
        };
        Self {
            w_q_down: store.register(format!("{p}.w_q_down"), m, &[d, h * dc]),
            q_gain: store.register(format!("{p}.q_gain"), ParamKind::Gain, &[h * dc]),
            w_kv_down: store.register(format!("{p}.w_kv_down"), m, &[d, dc]),
            kv_gain: store.register(format!("{p}.kv_gain"), ParamKind::Gain, &[dc]),
            w_q_up: per_head(store, "w_q_up"),
            w_k_up: per_head(store, "w_k_up"),
            w_v_up: per_head(store, "w_v_up"),
            w_out: store.register(format!("{p}.w_out"), m, &[h * dc, d]),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q_up.len()
    }

    /// Snapshot of the current parameter values.
    pub fn values(&self, store: &ParamStore) -> MlaValues {
        let get = |ids: &[ParamId]| ids.iter().map(|&i| store.get(i).clone()).collect();
        MlaValues {
            w_q_down: store.get(self.w_q_down).clone(),
            q_gain: store.get(self.q_gain).clone(),
            w_kv_down: store.get(self.w_kv_down).clone(),
            kv_gain: store.get(self.kv_gain).clone(),
            w_q_up: get(&self.w_q_up),
            w_k_up: get(&self.w_k_up),
            w_v_up: get(&self.w_v_up),
            w_out: store.get(self.w_out).clone(),
        }
    }
}

/// Plain-tensor copy of one layer's attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MlaValues {
    pub w_q_down: Tensor,
    pub q_gain: Tensor,
    pub w_kv_down: Tensor,
    pub kv_gain: Tensor,
    pub w_q_up: Vec<Tensor>,
    pub w_k_up: Vec<Tensor>,
    pub w_v_up: Vec<Tensor>,
    pub w_out: Tensor,
}

impl LoraLinear {
    fn register(store: &mut ParamStore, p: &str, base: (ParamId, ParamId), dims: (usize, usize), r: usize) -> Self {
        Self {
            w: base.0,
            bias: base.1,
            a: store.register(format!("{p}.a"), ParamKind::Matrix, &[dims.0, r]),
            b: store.register(format!("{p}.b"), ParamKind::Matrix, &[r, dims.1]),
        }
    }
}

impl SeqWeights {
    /// Registers every sequence-module parameter under `prefix`.
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: &SeqConfig, vocab: &Vocab) -> Self {
        let (d, e) = (cfg.d_model, cfg.emb_dim);
        let m = ParamKind::Matrix;
        let emb = ParamKind::Embedding;
        let tin = token_input_dim(cfg, vocab);
        let tokenizer = TokenizerWeights {
            e_type: store.register(format!("{prefix}.tok.e_type"), emb, &[4, e]),
            e_item: store.register(format!("{prefix}.tok.e_item"), emb, &[vocab.n_items, e]),
            e_surface: store.register(format!("{prefix}.tok.e_surface"), emb, &[vocab.n_surfaces, e]),
            e_time: store.register(format!("{prefix}.tok.e_time"), emb, &[HOURS_PER_DAY, e]),
            e_meta: store.register(format!("{prefix}.tok.e_meta"), emb, &[vocab.n_meta, e]),
            e_missing: store.register(format!("{prefix}.tok.e_missing"), emb, &[1, e]),
            w1: store.register(format!("{prefix}.tok.w1"), m, &[tin, d]),
            b1: store.register(format!("{prefix}.tok.b1"), ParamKind::Bias, &[d]),
            w2: store.register(format!("{prefix}.tok.w2"), m, &[d, d]),
            b2: store.register(format!("{prefix}.tok.b2"), ParamKind::Bias, &[d]),
        };
        let qin = query_input_dim(cfg, vocab);
        let nq = cfg.query_tokens;
        let aware = cfg.mode == QueryMode::CandidateAware;
        let mut opt = |name: &str, rows: usize| {
            aware.then(|| store.register(format!("{prefix}.query.{name}"), emb, &[rows, e]))
        };
        let e_advertiser = opt("e_advertiser", vocab.n_advertisers);
        let e_surface = opt("e_surface", vocab.n_surfaces);
        let e_device = opt("e_device", vocab.n_devices);
        let query = QueryWeights {
            e_advertiser,
            e_surface,
            e_device,
            e_hour: store.register(format!("{prefix}.query.e_hour"), emb, &[HOURS_PER_DAY, e]),
            proj: store.register(format!("{prefix}.query.proj"), m, &[qin, nq * d]),
            seeds: store.register(format!("{prefix}.query.seeds"), emb, &[nq, d]),
        };
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                LayerWeights {
                    mla: MlaWeights::register(store, &format!("{p}.mla"), d, cfg.heads, cfg.latent_dim),
                    norm1: store.register(format!("{p}.norm1"), ParamKind::Gain, &[d]),
                    ffn_w1: store.register(format!("{p}.ffn_w1"), m, &[d, cfg.d_ff()]),
                    ffn_w2: store.register(format!("{p}.ffn_w2"), m, &[cfg.d_ff(), d]),
                    norm2: store.register(format!("{p}.norm2"), ParamKind::Gain, &[d]),
                }
            })
            .collect();
        let (rin, hid, out) = (nq * d, cfg.readout_hidden(), cfg.d_seq());
        let base1 = (
            store.register(format!("{prefix}.readout.w1"), m, &[rin, hid]),
            store.register(format!("{prefix}.readout.b1"), ParamKind::Bias, &[hid]),
        );
        let base2 = (
            store.register(format!("{prefix}.readout.w2"), m, &[hid, out]),
            store.register(format!("{prefix}.readout.b2"), ParamKind::Bias, &[out]),
        );
        let r = cfg.lora_rank;
        let readout = (0..cfg.summaries)
            .map(|k| LoraMlp {
                l1: LoraLinear::register(store, &format!("{prefix}.readout{k}.l1"), base1, (rin, hid), r),
                l2: LoraLinear::register(store, &format!("{prefix}.readout{k}.l2"), base2, (hid, out), r),
            })
            .collect();
        Self {
            tokenizer,
            query,
            layers,
            readout,
        }
    }
}
