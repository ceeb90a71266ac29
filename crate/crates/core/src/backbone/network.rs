use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::Head;
use crate::numerics::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

use super::metrics::{check_weights, clamp_prob};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Embedding width of every sparse field.
    pub emb_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    /// Width of the shared representation `z`.
    pub out_dim: usize,
    pub head_hidden: usize,
    /// Loss weights in head order (CTR, CVR).
    pub head_weights: [f64; 2],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            emb_dim: 8,
            layers: 2,
            hidden: 32,
            out_dim: 16,
            head_hidden: 16,
            head_weights: [1.0, 1.0],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("backbone.layers must be at least 1".into()));
        }
        if self.emb_dim == 0 || self.hidden == 0 || self.out_dim == 0 || self.head_hidden == 0 {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        check_weights(&self.head_weights)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseField {
    pub name: String,
    pub vocab: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseField {
    pub name: String,
    pub dim: usize,
}

/// Declared non-sequence inputs, in concatenation order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub sparse: Vec<SparseField>,
    pub dense: Vec<DenseField>,
    pub floats: Vec<String>,
}

impl FeatureSchema {
    pub fn input_dim(&self, emb_dim: usize, summaries: usize, d_seq: usize) -> usize {
        self.sparse.len() * emb_dim
            + self.dense.iter().map(|f| f.dim).sum::<usize>()
            + self.floats.len()
            + summaries * d_seq
    }
}

/// Non-sequence features of one example.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureBundle {
    pub sparse: Vec<usize>,
    pub dense: Vec<Vec<f64>>,
    pub floats: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct InteractionLayer {
    pub mlp_w: ParamId,
    pub mlp_b: ParamId,
    pub cross_w: ParamId,
    pub cross_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Feature-interaction stack with one prediction head per task.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub schema: FeatureSchema,
    pub summaries: usize,
    pub d_seq: usize,
    pub tables: Vec<ParamId>,
    pub layers: Vec<InteractionLayer>,
    pub z_w: ParamId,
    pub z_b: ParamId,
    pub heads: Vec<HeadWeights>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: BackboneConfig,
        schema: FeatureSchema,
        summaries: usize,
        d_seq: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let m = ParamKind::Matrix;
        let b = ParamKind::Bias;
        let tables = schema
            .sparse
            .iter()
            .map(|f| store.register(format!("{prefix}.emb.{}", f.name), ParamKind::Embedding, &[f.vocab, cfg.emb_dim]))
            .collect();
        let d0 = schema.input_dim(cfg.emb_dim, summaries, d_seq);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let din = if l == 0 { d0 } else { cfg.hidden };
            let p = format!("{prefix}.layer{l}");
            layers.push(InteractionLayer {
                mlp_w: store.register(format!("{p}.mlp_w"), m, &[din, cfg.hidden]),
                mlp_b: store.register(format!("{p}.mlp_b"), b, &[cfg.hidden]),
                cross_w: store.register(format!("{p}.cross_w"), m, &[din, d0]),
                cross_b: store.register(format!("{p}.cross_b"), b, &[d0]),
                proj_w: store.register(format!("{p}.proj_w"), m, &[cfg.hidden + d0, cfg.hidden]),
                proj_b: store.register(format!("{p}.proj_b"), b, &[cfg.hidden]),
            });
        }
        let z_w = store.register(format!("{prefix}.z_w"), m, &[cfg.hidden, cfg.out_dim]);
        let z_b = store.register(format!("{prefix}.z_b"), b, &[cfg.out_dim]);
        let heads = Head::ALL
            .iter()
            .map(|h| {
                let p = format!("{prefix}.head.{}", h.name());
                HeadWeights {
                    w1: store.register(format!("{p}.w1"), m, &[cfg.out_dim, cfg.head_hidden]),
                    b1: store.register(format!("{p}.b1"), b, &[cfg.head_hidden]),
                    w2: store.register(format!("{p}.w2"), m, &[cfg.head_hidden, 1]),
                    b2: store.register(format!("{p}.b2"), b, &[1]),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            schema,
            summaries,
            d_seq,
            tables,
            layers,
            z_w,
            z_b,
            heads,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.schema.input_dim(self.cfg.emb_dim, self.summaries, self.d_seq)
    }

    /// `h0 = [sparse embeddings, dense, floats, summaries]` as a `1 x d_0` row.
    /// Columns of the concatenated input occupied by a dense or float field.
    pub fn input_columns(&self, field: &str) -> Option<std::ops::Range<usize>> {
        let mut at = self.schema.sparse.len() * self.cfg.emb_dim;
        for f in &self.schema.dense {
            if f.name == field {
                return Some(at..at + f.dim);
            }
            at += f.dim;
        }
        let i = self.schema.floats.iter().position(|f| f == field)?;
        Some(at + i..at + i + 1)
    }

    pub fn embed_and_concat(&self, tape: &mut Tape, bundle: &FeatureBundle, summaries: &[Var]) -> Result<Var> {
        let schema_err = |field: &str, detail: String| Error::Schema {
            field: field.to_string(),
            detail,
        };
        if bundle.sparse.len() != self.schema.sparse.len() {
            return Err(schema_err(
                "sparse",
                format!("expected {} ids, got {}", self.schema.sparse.len(), bundle.sparse.len()),
            ));
        }
        if bundle.dense.len() != self.schema.dense.len() {
            return Err(schema_err(
                "dense",
                format!("expected {} vectors, got {}", self.schema.dense.len(), bundle.dense.len()),
            ));
        }
        if bundle.floats.len() != self.schema.floats.len() {
            return Err(schema_err(
                "floats",
                format!("expected {} values, got {}", self.schema.floats.len(), bundle.floats.len()),
            ));
        }
        if summaries.len() != self.summaries {
            return Err(schema_err(
                "summaries",
                format!("expected {}, got {}", self.summaries, summaries.len()),
            ));
        }
        let mut parts = Vec::new();
        for ((field, &id), &table) in self.schema.sparse.iter().zip(&bundle.sparse).zip(&self.tables) {
            if id >= field.vocab {
                return Err(schema_err(&field.name, format!("id {id} outside vocabulary of {}", field.vocab)));
            }
            let t = tape.param(table);
            parts.push(tape.gather(t, &[id])?);
        }
        let mut flat = Vec::new();
        for (field, v) in self.schema.dense.iter().zip(&bundle.dense) {
            if v.len() != field.dim {
                return Err(schema_err(&field.name, format!("expected dim {}, got {}", field.dim, v.len())));
            }
            flat.extend_from_slice(v);
        }
        flat.extend_from_slice(&bundle.floats);
        if !flat.is_empty() {
            parts.push(tape.constant(Tensor::row_vector(flat)));
        }
        for &s in summaries {
            if tape.value(s).numel() != self.d_seq {
                return Err(schema_err("summaries", format!("summary width must be {}", self.d_seq)));
            }
            parts.push(s);
        }
        match parts.len() {
            0 => Ok(tape.constant(Tensor::zeros(&[1, 0]))),
            1 => Ok(parts[0]),
            _ => tape.concat_cols(&parts),
        }
    }

    /// Stack of `[silu(x W + b), x0 * (x W_c + b_c)] P + b_P` layers, then `z = x W_z + b_z`.
    pub fn interaction_stack(&self, tape: &mut Tape, h0: Var) -> Result<Var> {
        let mut x = h0;
        for l in &self.layers {
            let (mw, mb, cw, cb, pw, pb) = (
                tape.param(l.mlp_w),
                tape.param(l.mlp_b),
                tape.param(l.cross_w),
                tape.param(l.cross_b),
                tape.param(l.proj_w),
                tape.param(l.proj_b),
            );
            let m = tape.matmul(x, mw)?;
            let m = tape.add_row(m, mb)?;
            let m = tape.silu(m);
            let c = tape.matmul(x, cw)?;
            let c = tape.add_row(c, cb)?;
            let c = tape.mul(h0, c)?;
            let cat = tape.concat_cols(&[m, c])?;
            let y = tape.matmul(cat, pw)?;
            x = tape.add_row(y, pb)?;
        }
        let zw = tape.param(self.z_w);
        let zb = tape.param(self.z_b);
        let z = tape.matmul(x, zw)?;
        tape.add_row(z, zb)
    }

    /// Per-head logits, `1 x |H|`.
    pub fn head_logits(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let mut logits = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let (w1, b1, w2, b2) = (tape.param(h.w1), tape.param(h.b1), tape.param(h.w2), tape.param(h.b2));
            let a = tape.matmul(z, w1)?;
            let a = tape.add_row(a, b1)?;
            let a = tape.silu(a);
            let o = tape.matmul(a, w2)?;
            logits.push(tape.add_row(o, b2)?);
        }
        tape.concat_cols(&logits)
    }

    /// Per-head probabilities (unclamped on the tape; losses clamp).
    pub fn predict(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let logits = self.head_logits(tape, z)?;
        Ok(tape.sigmoid(logits))
    }

    /// Weighted sum of per-head BCE terms for one example.
    pub fn loss(&self, tape: &mut Tape, probs: Var, labels: [f64; 2]) -> Result<Var> {
        let mut terms = Vec::new();
        for (i, &w) in self.cfg.head_weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let p = tape.slice_cols(probs, i, i + 1)?;
            let l = tape.bce(p, &labels[i..i + 1], super::PRED_EPS)?;
            terms.push(if w == 1.0 { l } else { tape.scale(l, w) });
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        Ok(total)
    }
}

/// Reads clamped head probabilities from a `1 x 2` value.
pub fn clamped_predictions(t: &Tensor) -> [f64; 2] {
    [clamp_prob(t.data()[0]), clamp_prob(t.data()[1])]
}

impl Backbone {
    /// Multiply-accumulate FLOPs of the interaction stack and heads per example.
    pub fn flops(&self) -> u64 {
        let d0 = self.input_dim() as u64;
        let (hid, out, hh) = (self.cfg.hidden as u64, self.cfg.out_dim as u64, self.cfg.head_hidden as u64);
        let mut total = 0;
        for l in 0..self.layers.len() {
            let din = if l == 0 { d0 } else { hid };
            total += 2 * (din * hid + din * d0 + (hid + d0) * hid);
        }
        total += 2 * hid * out;
        total + self.heads.len() as u64 * 2 * (out * hh + hh)
    }
}
