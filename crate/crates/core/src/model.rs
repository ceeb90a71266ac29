//! Full ranking model: sequence module, interaction backbone and heads.

use serde::{Deserialize, Serialize};

use crate::backbone::{clamped_predictions, Backbone, BackboneConfig, DenseField, FeatureBundle, FeatureSchema, SparseField};
use crate::error::{Error, Result};
use crate::events::{compose_sequence, truncate_to_horizon, ActionEvent, LabeledExample, Vocab, NUM_CROSS_FEATURES};
use crate::numerics::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::sequence::{flop_count, AttnProbe, QueryInput, QueryMode, SeqConfig, SeqModule, HOURS_PER_DAY};

/// How the event sequence fed to the model is selected from the history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SeqPolicy {
    /// The `length` most recent events.
    Recent { length: usize },
    /// Most recent views/clicks and conversions under separate quotas.
    Compose { views: usize, conversions: usize },
}

impl SeqPolicy {
    pub fn length(&self) -> usize {
        match self {
            SeqPolicy::Recent { length } => *length,
            SeqPolicy::Compose { views, conversions } => views + conversions,
        }
    }

    pub fn select(&self, events: &[ActionEvent]) -> Vec<ActionEvent> {
        match self {
            SeqPolicy::Recent { length } => truncate_to_horizon(events, *length).to_vec(),
            SeqPolicy::Compose { views, conversions } => compose_sequence(events, *views, *conversions),
        }
    }
}

impl Default for SeqPolicy {
    fn default() -> Self {
        SeqPolicy::Recent { length: 64 }
    }
}

/// Role of a model in the two-stage pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transfer {
    /// Plain ranker.
    #[default]
    None,
    /// User-only model whose first summary is projected to `dim` and is the
    /// only sequence input of its own backbone.
    Upstream { dim: usize },
    /// Ranker that reads a cached upstream vector of width `dim`.
    Downstream { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seq: SeqConfig,
    pub backbone: BackboneConfig,
    pub policy: SeqPolicy,
    pub transfer: Transfer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq: SeqConfig::default(),
            backbone: BackboneConfig::default(),
            policy: SeqPolicy::default(),
            transfer: Transfer::None,
        }
    }
}

/// Cached upstream vector as seen by a downstream request.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedEmbedding {
    pub vector: Vec<f64>,
    pub missing: bool,
}

pub struct ModelOutput {
    /// `1 x 2` head probabilities.
    pub probs: Var,
    pub probe: Option<AttnProbe>,
}

#[derive(Clone, Debug)]
pub struct RankingModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub seq: SeqModule,
    pub backbone: Backbone,
    /// Upstream projection `(W, b)` from the first summary to the transfer width.
    pub projection: Option<(ParamId, ParamId)>,
}

const SPARSE_FIELDS: [&str; 5] = ["ad", "advertiser", "surface", "device", "hour"];

impl RankingModel {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, vocab: Vocab) -> Result<Self> {
        let upstream = matches!(cfg.transfer, Transfer::Upstream { .. });
        if upstream != (cfg.seq.mode == QueryMode::UserOnly) {
            return Err(Error::Config(
                "upstream models use user_only queries and rankers use candidate_aware queries".into(),
            ));
        }
        let seq = SeqModule::new(store, "seq", cfg.seq.clone(), vocab)?;
        let vocabs = [vocab.n_items, vocab.n_advertisers, vocab.n_surfaces, vocab.n_devices, HOURS_PER_DAY];
        let mut schema = FeatureSchema {
            sparse: SPARSE_FIELDS
                .iter()
                .zip(vocabs)
                .map(|(n, v)| SparseField {
                    name: n.to_string(),
                    vocab: v,
                })
                .collect(),
            dense: vec![DenseField {
                name: "candidate_content".into(),
                dim: vocab.d_content,
            }],
            floats: (0..NUM_CROSS_FEATURES).map(|i| format!("cross{i}")).collect(),
        };
        let (summaries, d_seq, projection) = match cfg.transfer {
            Transfer::Upstream { dim } => {
                let w = store.register("transfer.w", ParamKind::Matrix, &[cfg.seq.d_seq(), dim]);
                let b = store.register("transfer.b", ParamKind::Bias, &[dim]);
                (1, dim, Some((w, b)))
            }
            Transfer::Downstream { dim } => {
                schema.dense.push(DenseField {
                    name: "upstream_embedding".into(),
                    dim,
                });
                schema.floats.push("upstream_missing".into());
                (cfg.seq.summaries, cfg.seq.d_seq(), None)
            }
            Transfer::None => (cfg.seq.summaries, cfg.seq.d_seq(), None),
        };
        let backbone = Backbone::new(store, "backbone", cfg.backbone.clone(), schema, summaries, d_seq)?;
        Ok(Self {
            cfg,
            vocab,
            seq,
            backbone,
            projection,
        })
    }

    pub fn transfer_dim(&self) -> Option<usize> {
        match self.cfg.transfer {
            Transfer::Upstream { dim } | Transfer::Downstream { dim } => Some(dim),
            Transfer::None => None,
        }
    }

    /// Sequence FLOPs per example at the policy length.
    pub fn c_seq(&self) -> u64 {
        flop_count(&self.cfg.seq, self.vocab.d_content, self.cfg.policy.length()).seq_flops
    }

    /// Sequence FLOPs plus tokenization, query, readout, projection and backbone.
    pub fn c_full(&self) -> u64 {
        let r = flop_count(&self.cfg.seq, self.vocab.d_content, self.cfg.policy.length());
        let proj = match self.cfg.transfer {
            Transfer::Upstream { dim } => 2 * (self.cfg.seq.d_seq() * dim) as u64,
            _ => 0,
        };
        r.seq_flops + r.tokenization + r.query + r.readout + proj + self.backbone.flops()
    }

    fn bundle(&self, ex: &LabeledExample, cached: Option<&CachedEmbedding>) -> Result<FeatureBundle> {
        let content = if self.cfg.seq.use_content {
            ex.candidate.content_vec.clone()
        } else {
            vec![0.0; self.vocab.d_content]
        };
        let hour = ((ex.context.request_time_s / 3600) % HOURS_PER_DAY as u64) as usize;
        let mut b = FeatureBundle {
            sparse: vec![
                ex.candidate.ad_id,
                ex.candidate.advertiser_id,
                ex.context.surface_id,
                ex.context.device_id,
                hour,
            ],
            dense: vec![content],
            floats: ex.cross_features.clone(),
        };
        if let Transfer::Downstream { dim } = self.cfg.transfer {
            match cached {
                Some(c) => {
                    b.dense.push(c.vector.clone());
                    b.floats.push(if c.missing { 1.0 } else { 0.0 });
                }
                None => {
                    b.dense.push(vec![0.0; dim]);
                    b.floats.push(1.0);
                }
            }
        }
        Ok(b)
    }

    /// Sequence summaries for an upstream model: `history` is used as-is
    /// (after the policy) and time encodings are relative to its newest event,
    /// or `fallback_time` when it is empty.
    pub fn user_embedding_var(&self, tape: &mut Tape, history: &[ActionEvent], fallback_time: u64) -> Result<Var> {
        let Some((w, b)) = self.projection else {
            return Err(Error::Config("user embeddings require an upstream model".into()));
        };
        let events = self.cfg.policy.select(history);
        let reference = events.last().map_or(fallback_time, |e| e.timestamp_s);
        let input = QueryInput::User {
            reference_time_s: reference,
        };
        let out = self.seq.forward(tape, &events, &input, false)?;
        let wv = tape.param(w);
        let bv = tape.param(b);
        let e = tape.matmul(out.summaries[0], wv)?;
        tape.add_row(e, bv)
    }

    /// Head probabilities for one example.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ex: &LabeledExample,
        cached: Option<&CachedEmbedding>,
        capture: bool,
    ) -> Result<ModelOutput> {
        let bundle = self.bundle(ex, cached)?;
        let (summaries, probe) = match self.cfg.transfer {
            Transfer::Upstream { .. } => (vec![self.user_embedding_var(tape, &ex.events, ex.request_time_s)?], None),
            _ => {
                let events = self.cfg.policy.select(&ex.events);
                let input = QueryInput::Candidate {
                    candidate: &ex.candidate,
                    context: &ex.context,
                    cross_features: &ex.cross_features,
                };
                let out = self.seq.forward(tape, &events, &input, capture)?;
                (out.summaries, out.probe)
            }
        };
        let h0 = self.backbone.embed_and_concat(tape, &bundle, &summaries)?;
        let z = self.backbone.interaction_stack(tape, h0)?;
        let probs = self.backbone.predict(tape, z)?;
        Ok(ModelOutput { probs, probe })
    }

    /// Weighted multi-task loss for one example.
    pub fn loss(&self, tape: &mut Tape, ex: &LabeledExample, cached: Option<&CachedEmbedding>) -> Result<Var> {
        let out = self.forward(tape, ex, cached, false)?;
        let labels = [f64::from(ex.labels.0[0]), f64::from(ex.labels.0[1])];
        self.backbone.loss(tape, out.probs, labels)
    }

    /// Clamped head probabilities for one example.
    pub fn predict(&self, store: &ParamStore, ex: &LabeledExample, cached: Option<&CachedEmbedding>) -> Result<[f64; 2]> {
        let mut tape = Tape::new(store);
        let out = self.forward(&mut tape, ex, cached, false)?;
        Ok(clamped_predictions(tape.value(out.probs)))
    }

    /// Projected user embedding for an upstream model.
    pub fn user_embedding(&self, store: &ParamStore, history: &[ActionEvent], fallback_time: u64) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let v = self.user_embedding_var(&mut tape, history, fallback_time)?;
        Ok(tape.value(v).data().to_vec())
    }
}

/// Zero vector with the missing flag set.
pub fn fallback_embedding(dim: usize) -> CachedEmbedding {
    CachedEmbedding {
        vector: Tensor::zeros(&[dim]).into_data(),
        missing: true,
    }
}
