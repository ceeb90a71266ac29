use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::evaluate_heads;
use crate::error::{Error, Result};
use crate::events::{LabeledExample, Vocab};
use crate::model::{CachedEmbedding, ModelConfig, RankingModel};
use crate::numerics::{Gradients, ParamStore, Tape, Var};
use crate::rng::stream;

use super::adam::{adam_step, AdamState, TrainConfig};
use super::init::init_params;

/// Examples per gradient shard; shards are the unit of parallel work and
/// are always reduced in the same order.
const SHARD: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Mean batch loss since the previous row.
    pub loss: f64,
    pub ne: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Batch loss at every step.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss,ne_ctr,ne_cvr")?;
        for r in &self.rows {
            match r.ne {
                Some([a, b]) => writeln!(w, "{},{:.8},{a:.8},{b:.8}", r.step, r.loss)?,
                None => writeln!(w, "{},{:.8},,", r.step, r.loss)?,
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn last_ne(&self) -> Option<[f64; 2]> {
        self.rows.iter().rev().find_map(|r| r.ne)
    }
}

/// Fixed-order pairwise sum.
fn pairwise_sum(mut parts: Vec<Gradients>) -> Option<Gradients> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.add_assign(&b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}

/// Mean loss and mean gradient over `batch`.
pub fn batch_gradients<T, F>(store: &ParamStore, batch: &[&T], loss_fn: &F) -> Result<(f64, Gradients)>
where
    T: Sync,
    F: Fn(&mut Tape, &T) -> Result<Var> + Sync,
{
    let shards: Vec<(f64, Gradients)> = batch
        .par_chunks(SHARD)
        .map(|chunk| {
            let mut g = Gradients::zeros_like(store);
            let mut loss = 0.0;
            for ex in chunk {
                let mut tape = Tape::new(store);
                let l = loss_fn(&mut tape, ex)?;
                loss += tape.value(l).data()[0];
                tape.backward_into(l, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let loss: f64 = shards.iter().map(|s| s.0).sum();
    let mut grads = pairwise_sum(shards.into_iter().map(|s| s.1).collect())
        .unwrap_or_else(|| Gradients::zeros_like(store));
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Minibatch Adam over `data`. Epoch `e` visits the examples in a permutation
/// drawn from `(cfg.seed, e)`; `eval` runs every `eval_interval` steps and at the end.
pub fn train<T, F>(
    store: &mut ParamStore,
    data: &[T],
    cfg: &TrainConfig,
    loss_fn: F,
    eval: Option<&(dyn Fn(&ParamStore) -> Result<[f64; 2]> + Sync)>,
) -> Result<TrainLog>
where
    T: Sync,
    F: Fn(&mut Tape, &T) -> Result<Var> + Sync,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut state = AdamState::new(store);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    let mut epoch = 0u64;
    let mut since_log = Vec::new();
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if pos == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut stream(cfg.seed, "shuffle", epoch));
                epoch += 1;
                pos = 0;
            }
            batch.push(&data[order[pos]]);
            pos += 1;
        }
        let (loss, grads) = batch_gradients(store, &batch, &loss_fn)?;
        adam_step(store, grads, &mut state, cfg)?;
        log.step_losses.push(loss);
        since_log.push(loss);
        let at_interval = cfg.eval_interval > 0 && step % cfg.eval_interval == 0;
        if at_interval || step == cfg.steps {
            let ne = eval.map(|f| f(store)).transpose()?;
            log.rows.push(LogRow {
                step,
                loss: since_log.iter().sum::<f64>() / since_log.len() as f64,
                ne,
            });
            since_log.clear();
        }
    }
    Ok(log)
}

/// Clamped predictions for every example, in order.
pub fn predict_all(
    model: &RankingModel,
    store: &ParamStore,
    examples: &[LabeledExample],
    cached: Option<&[CachedEmbedding]>,
) -> Result<Vec<[f64; 2]>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| model.predict(store, ex, cached.map(|c| &c[i])))
        .collect()
}

/// Per-head NE of `model` on `examples`.
pub fn evaluate_model(
    model: &RankingModel,
    store: &ParamStore,
    examples: &[LabeledExample],
    cached: Option<&[CachedEmbedding]>,
) -> Result<[f64; 2]> {
    let preds = predict_all(model, store, examples, cached)?;
    let labels: Vec<_> = examples.iter().map(|e| e.labels).collect();
    evaluate_heads(&preds, &labels)
}

/// Optional per-example cached embeddings for train and eval sets.
#[derive(Clone, Copy, Default)]
pub struct CachedInputs<'a> {
    pub train: Option<&'a [CachedEmbedding]>,
    pub eval: Option<&'a [CachedEmbedding]>,
}

/// Trains `model` on `train`, logging eval NE on `eval` when it is nonempty.
pub fn train_model(
    model: &RankingModel,
    store: &mut ParamStore,
    train_set: &[LabeledExample],
    eval_set: &[LabeledExample],
    cached: CachedInputs,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if let Some(c) = cached.train {
        if c.len() != train_set.len() {
            return Err(Error::Invalid("cached embeddings do not align with the training set".into()));
        }
    }
    let indexed: Vec<usize> = (0..train_set.len()).collect();
    let loss_fn = |tape: &mut Tape, &i: &usize| model.loss(tape, &train_set[i], cached.train.map(|c| &c[i]));
    let eval_fn = |s: &ParamStore| evaluate_model(model, s, eval_set, cached.eval);
    let eval: Option<&(dyn Fn(&ParamStore) -> Result<[f64; 2]> + Sync)> =
        if eval_set.is_empty() { None } else { Some(&eval_fn) };
    train(store, &indexed, cfg, loss_fn, eval)
}

/// A model together with its trained parameters.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: RankingModel,
    pub params: ParamStore,
    pub log: TrainLog,
}

/// Builds `cfg`, initializes it from `train_cfg.seed` and trains it.
pub fn fit_model(
    cfg: ModelConfig,
    vocab: Vocab,
    train_set: &[LabeledExample],
    eval_set: &[LabeledExample],
    cached: CachedInputs,
    train_cfg: &TrainConfig,
) -> Result<Fitted> {
    let mut params = ParamStore::new();
    let model = RankingModel::new(&mut params, cfg, vocab)?;
    init_params(&mut params, train_cfg.seed);
    let log = train_model(&model, &mut params, train_set, eval_set, cached, train_cfg)?;
    Ok(Fitted { model, params, log })
}
