use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::store::EmbeddingStore;
use super::stream::{merge_timeline, process_event_stream, upstream_infer, TriggerPolicy, UpdateLogEntry, UpstreamEncoder};
use crate::backbone::delta_ne;
use crate::error::{Error, Result};
use crate::events::{Dataset, LabeledExample, UserHistory, Vocab};
use crate::model::{fallback_embedding, CachedEmbedding, ModelConfig, RankingModel, SeqPolicy, Transfer};
use crate::numerics::ParamStore;
use crate::sequence::{QueryMode, SeqConfig};
use crate::trainer::{evaluate_model, fit_model, CachedInputs, TrainConfig};

/// Two-stage setup. The query mode and transfer role of each model are
/// implied by its position and overridden on use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub d_transfer: usize,
    /// Upstream variant under evaluation.
    pub upstream: ModelConfig,
    /// Upstream reference the variant is compared against.
    pub upstream_baseline: ModelConfig,
    pub downstream: ModelConfig,
    pub trigger: TriggerPolicy,
    /// Inference lag added to every record's `computed_at`.
    pub delay_s: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let upstream = ModelConfig {
            seq: SeqConfig {
                mode: QueryMode::UserOnly,
                ..SeqConfig::default()
            },
            policy: SeqPolicy::Recent { length: 256 },
            ..ModelConfig::default()
        };
        let upstream_baseline = ModelConfig {
            policy: SeqPolicy::Recent { length: 32 },
            ..upstream.clone()
        };
        let downstream = ModelConfig {
            seq: SeqConfig {
                layers: 1,
                d_model: 16,
                heads: 1,
                latent_dim: 8,
                ..SeqConfig::default()
            },
            policy: SeqPolicy::Recent { length: 32 },
            ..ModelConfig::default()
        };
        Self {
            d_transfer: 64,
            upstream,
            upstream_baseline,
            downstream,
            trigger: TriggerPolicy::default(),
            delay_s: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_transfer == 0 {
            return Err(Error::Config("pipeline.d_transfer must be positive".into()));
        }
        for m in [&self.upstream, &self.upstream_baseline, &self.downstream] {
            m.seq.validate()?;
            m.backbone.validate()?;
        }
        Ok(())
    }

    pub fn as_upstream(&self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        c.seq.mode = QueryMode::UserOnly;
        c.transfer = Transfer::Upstream { dim: self.d_transfer };
        c
    }

    pub fn as_downstream(&self) -> ModelConfig {
        let mut c = self.downstream.clone();
        c.seq.mode = QueryMode::CandidateAware;
        c.transfer = Transfer::Downstream { dim: self.d_transfer };
        c
    }
}

/// `ΔNE_down / ΔNE_up` as a fraction.
pub fn transfer_ratio(delta_ne_up: f64, delta_ne_down: f64) -> Result<f64> {
    if delta_ne_up == 0.0 || !delta_ne_up.is_finite() {
        return Err(Error::UndefinedTransferRatio);
    }
    Ok(delta_ne_down / delta_ne_up)
}

/// Whole-percent display of a ratio; the fraction is dropped, and the small
/// offset keeps exact values such as 0.07/0.14 from displaying one low.
pub fn display_percent(ratio: f64) -> i64 {
    let pct = 100.0 * ratio;
    (pct + 1e-9 * pct.signum()).trunc() as i64
}

/// As-of cached vectors for each example at its request time.
pub fn cached_embeddings(store: &EmbeddingStore, examples: &[LabeledExample]) -> Vec<CachedEmbedding> {
    examples.iter().map(|e| store.get_asof(e.user_id, e.request_time_s)).collect()
}

/// Downstream head probabilities with the store's as-of vector.
pub fn downstream_score(
    model: &RankingModel,
    params: &ParamStore,
    ex: &LabeledExample,
    store: &EmbeddingStore,
) -> Result<[f64; 2]> {
    let cached = store.get_asof(ex.user_id, ex.request_time_s);
    model.predict(params, ex, Some(&cached))
}

/// What an always-fresh pipeline would hand the ranker: the upstream vector
/// computed at request time from every event up to it, or the fallback when
/// the user has no events yet.
pub fn synchronous_embedding(
    encoder: &UpstreamEncoder,
    user: &UserHistory,
    request_time: u64,
) -> Result<CachedEmbedding> {
    let history = user.up_to(request_time);
    if history.is_empty() {
        return Ok(fallback_embedding(encoder.dim()));
    }
    let record = upstream_infer(encoder, user.user_id, history, request_time)?;
    Ok(CachedEmbedding {
        vector: record.vector,
        missing: false,
    })
}

/// Upstream variant trained, published and consumed by a retrained ranker.
#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub ne_up: f64,
    pub ne_down: f64,
    pub seq_flops_up: u64,
    pub update_log: Vec<UpdateLogEntry>,
    /// Mean `request_time - computed_at` over eval requests with a record.
    pub mean_staleness_s: f64,
    pub missing_fraction: f64,
}

fn request_horizon(ds: &Dataset) -> u64 {
    ds.train.iter().chain(&ds.eval).map(|e| e.request_time_s).max().unwrap_or(0)
}

fn downstream_ne(
    cfg: &PipelineConfig,
    ds: &Dataset,
    vocab: Vocab,
    train: &TrainConfig,
    train_cached: &[CachedEmbedding],
    eval_cached: &[CachedEmbedding],
) -> Result<f64> {
    let cached = CachedInputs {
        train: Some(train_cached),
        eval: Some(eval_cached),
    };
    let down = fit_model(cfg.as_downstream(), vocab, &ds.train, &[], cached, train)?;
    Ok(evaluate_model(&down.model, &down.params, &ds.eval, Some(eval_cached))?[0])
}

/// Trains `upstream` on the shared labels, replays the event stream into a
/// fresh store and retrains the downstream ranker (same seed) on its vectors.
/// NE values are CTR-head NE on the eval split.
pub fn evaluate_variant(
    cfg: &PipelineConfig,
    upstream: &ModelConfig,
    version: &str,
    ds: &Dataset,
    vocab: Vocab,
    train: &TrainConfig,
) -> Result<VariantOutcome> {
    let up = fit_model(cfg.as_upstream(upstream), vocab, &ds.train, &[], CachedInputs::default(), train)?;
    let ne_up = evaluate_model(&up.model, &up.params, &ds.eval, None)?[0];
    let encoder = UpstreamEncoder::new(&up.model, &up.params, version)?;
    let store = EmbeddingStore::new(cfg.d_transfer);
    let timeline = merge_timeline(&ds.users, request_horizon(ds));
    let update_log = process_event_stream(&timeline, &cfg.trigger, &encoder, &store, cfg.delay_s)?;
    let train_cached = cached_embeddings(&store, &ds.train);
    let eval_cached = cached_embeddings(&store, &ds.eval);
    let ne_down = downstream_ne(cfg, ds, vocab, train, &train_cached, &eval_cached)?;
    let ages: Vec<f64> = ds
        .eval
        .iter()
        .filter_map(|e| store.record_asof(e.user_id, e.request_time_s).map(|r| (e.request_time_s - r.computed_at) as f64))
        .collect();
    Ok(VariantOutcome {
        ne_up,
        ne_down,
        seq_flops_up: up.model.c_seq(),
        update_log,
        mean_staleness_s: if ages.is_empty() { 0.0 } else { ages.iter().sum::<f64>() / ages.len() as f64 },
        missing_fraction: 1.0 - ages.len() as f64 / ds.eval.len().max(1) as f64,
    })
}

/// Downstream NE when every request falls back to the missing vector.
pub fn evaluate_without_upstream(cfg: &PipelineConfig, ds: &Dataset, vocab: Vocab, train: &TrainConfig) -> Result<f64> {
    let fallback = fallback_embedding(cfg.d_transfer);
    let train_cached = vec![fallback.clone(); ds.train.len()];
    let eval_cached = vec![fallback; ds.eval.len()];
    downstream_ne(cfg, ds, vocab, train, &train_cached, &eval_cached)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub ne_up: f64,
    pub ne_down: f64,
    pub ne_down_baseline: f64,
    pub tau_pct: f64,
    pub seq_flops_up: u64,
    pub seq_flops_down: u64,
    pub flops_ratio: f64,
    pub tau_display_pct: i64,
    pub ne_up_baseline: f64,
    pub ne_down_without: f64,
    pub delta_ne_up_pct: f64,
    pub delta_ne_down_pct: f64,
    pub seq_flops_up_baseline: u64,
    pub d_transfer: usize,
    pub updates: usize,
    pub mean_staleness_s: f64,
    pub missing_fraction: f64,
    /// Upstream NE is measured on the ranking labels, a stand-in for a
    /// dedicated user-modeling objective.
    pub upstream_task: String,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub update_log: Vec<UpdateLogEntry>,
}

/// Baseline and candidate upstream variants, their retrained rankers and a
/// ranker without upstream input; the three downstream fits are independent.
pub fn evaluate_pipeline(cfg: &PipelineConfig, ds: &Dataset, vocab: Vocab, train: &TrainConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let (variants, without) = rayon::join(
        || {
            [(&cfg.upstream_baseline, "baseline"), (&cfg.upstream, "candidate")]
                .into_par_iter()
                .map(|(m, v)| evaluate_variant(cfg, m, v, ds, vocab, train))
                .collect::<Result<Vec<_>>>()
        },
        || evaluate_without_upstream(cfg, ds, vocab, train),
    );
    let mut variants = variants?;
    let without = without?;
    let cand = variants.pop().expect("two variants");
    let base = variants.pop().expect("two variants");
    let d_up = delta_ne(cand.ne_up, base.ne_up)?;
    let d_down = delta_ne(cand.ne_down, base.ne_down)?;
    let tau = transfer_ratio(d_up, d_down)?;
    let seq_flops_down = {
        let mut scratch = ParamStore::new();
        RankingModel::new(&mut scratch, cfg.as_downstream(), vocab)?.c_seq()
    };
    let report = PipelineReport {
        ne_up: cand.ne_up,
        ne_down: cand.ne_down,
        ne_down_baseline: base.ne_down,
        tau_pct: 100.0 * tau,
        seq_flops_up: cand.seq_flops_up,
        seq_flops_down,
        flops_ratio: cand.seq_flops_up as f64 / seq_flops_down.max(1) as f64,
        tau_display_pct: display_percent(tau),
        ne_up_baseline: base.ne_up,
        ne_down_without: without,
        delta_ne_up_pct: d_up,
        delta_ne_down_pct: d_down,
        seq_flops_up_baseline: base.seq_flops_up,
        d_transfer: cfg.d_transfer,
        updates: cand.update_log.len(),
        mean_staleness_s: cand.mean_staleness_s,
        missing_fraction: cand.missing_fraction,
        upstream_task: "shared_ranking_labels".into(),
    };
    Ok(PipelineOutcome {
        report,
        update_log: cand.update_log,
    })
}
