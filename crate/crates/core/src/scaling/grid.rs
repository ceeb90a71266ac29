use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spec::{replicate_seed, ExperimentSpec, FlopsColumn, RunConfig};
use crate::backbone::delta_ne;
use crate::error::Result;
use crate::events::{Dataset, Vocab};
use crate::model::{ModelConfig, RankingModel};
use crate::numerics::ParamStore;
use crate::trainer::{evaluate_model, fit_model, CachedInputs, TrainConfig};

/// Mean and standard error of the mean (zero for a single value).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `sqrt(a^2 + b^2)`: stderr of a difference of independent means.
pub fn pooled_stderr(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// One training run of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub ne: [f64; 2],
    /// Percent ΔNE (CTR) against the baseline run with the same seed; absent
    /// when that baseline run failed.
    pub delta_ne_pct: Option<f64>,
}

/// Aggregated outcome of a configuration over its replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_id: String,
    pub layers: usize,
    pub d_model: usize,
    pub length: usize,
    pub content: bool,
    pub c_seq: u64,
    pub c_full: u64,
    /// Successful replicates ordered by seed.
    pub runs: Vec<SeedRun>,
    pub ne_ctr_mean: f64,
    pub ne_ctr_stderr: f64,
    pub delta_ne_mean: f64,
    pub delta_ne_stderr: f64,
    /// Failure messages of replicates that did not finish, by seed.
    pub errors: Vec<(u64, String)>,
}

impl RunResult {
    pub fn flops(&self, col: FlopsColumn) -> u64 {
        match col {
            FlopsColumn::CSeq => self.c_seq,
            FlopsColumn::CFull => self.c_full,
        }
    }

    pub fn ne_ctr(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.ne[0]).collect()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.delta_ne_pct).collect()
    }

    pub fn failed(&self) -> bool {
        !self.errors.is_empty()
    }
}

/// `(c_seq, c_full)` of a model configuration.
pub fn config_flops(model: &ModelConfig, vocab: Vocab) -> Result<(u64, u64)> {
    let mut scratch = ParamStore::new();
    let m = RankingModel::new(&mut scratch, model.clone(), vocab)?;
    Ok((m.c_seq(), m.c_full()))
}

/// Eval NE of `model` trained with replicate seed `r`.
pub fn train_and_evaluate(model: &ModelConfig, ds: &Dataset, vocab: Vocab, train: &TrainConfig, r: u64) -> Result<[f64; 2]> {
    let cfg = TrainConfig {
        seed: replicate_seed(train.seed, r),
        ..train.clone()
    };
    let fitted = fit_model(model.clone(), vocab, &ds.train, &[], CachedInputs::default(), &cfg)?;
    evaluate_model(&fitted.model, &fitted.params, &ds.eval, None)
}

/// Trains every (config, replicate) cell and aggregates per config. Cells run
/// on the current rayon pool; results do not depend on completion order.
pub fn run_configs(
    configs: &[RunConfig],
    baseline_id: &str,
    seeds: &[u64],
    ds: &Dataset,
    vocab: Vocab,
    train: &TrainConfig,
) -> Result<Vec<RunResult>> {
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    let flops: Vec<Result<(u64, u64)>> = configs.iter().map(|c| config_flops(&c.model, vocab)).collect();
    let cells: Vec<(usize, u64)> = (0..configs.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let outcomes: Vec<Result<[f64; 2]>> = cells
        .par_iter()
        .map(|&(c, s)| train_and_evaluate(&configs[c].model, ds, vocab, train, s))
        .collect();

    let mut per_config: Vec<(Vec<SeedRun>, Vec<(u64, String)>)> = vec![(Vec::new(), Vec::new()); configs.len()];
    for (&(c, s), out) in cells.iter().zip(outcomes) {
        match out {
            Ok(ne) => per_config[c].0.push(SeedRun {
                seed: s,
                ne,
                delta_ne_pct: None,
            }),
            Err(e) => per_config[c].1.push((s, e.to_string())),
        }
    }
    let base_idx = configs.iter().position(|c| c.id == baseline_id);
    let base_ne: BTreeMap<u64, f64> = base_idx
        .map(|i| per_config[i].0.iter().map(|r| (r.seed, r.ne[0])).collect())
        .unwrap_or_default();

    let mut results = Vec::with_capacity(configs.len());
    for ((cfg, (mut runs, errors)), flops) in configs.iter().zip(per_config).zip(flops) {
        let (c_seq, c_full) = flops.unwrap_or((0, 0));
        for r in &mut runs {
            r.delta_ne_pct = base_ne.get(&r.seed).map(|&b| delta_ne(r.ne[0], b)).transpose()?;
        }
        let ne: Vec<f64> = runs.iter().map(|r| r.ne[0]).collect();
        let (ne_ctr_mean, ne_ctr_stderr) = mean_stderr(&ne);
        let delta: Vec<f64> = runs.iter().filter_map(|r| r.delta_ne_pct).collect();
        let (delta_ne_mean, delta_ne_stderr) = mean_stderr(&delta);
        results.push(RunResult {
            config_id: cfg.id.clone(),
            layers: cfg.model.seq.layers,
            d_model: cfg.model.seq.d_model,
            length: cfg.model.policy.length(),
            content: cfg.model.seq.use_content,
            c_seq,
            c_full,
            runs,
            ne_ctr_mean,
            ne_ctr_stderr,
            delta_ne_mean,
            delta_ne_stderr,
            errors,
        });
    }
    Ok(results)
}

/// Runs the sweep described by `spec` around `base`.
pub fn run_grid(spec: &ExperimentSpec, base: &ModelConfig, ds: &Dataset, vocab: Vocab, train: &TrainConfig) -> Result<Vec<RunResult>> {
    let configs = spec.configs(base)?;
    let baseline = spec.baseline_id(&configs)?;
    run_configs(&configs, &baseline, &spec.seeds, ds, vocab, train)
}

fn fmt_f(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.8}")
    } else {
        String::new()
    }
}

/// One row per configuration.
pub fn write_results_csv<W: Write>(mut w: W, results: &[RunResult]) -> Result<()> {
    writeln!(w, "config_id,L,d,T,content,c_seq,c_full,ne_ctr_mean,ne_ctr_stderr,delta_ne_pct")?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.config_id,
            r.layers,
            r.d_model,
            r.length,
            r.content,
            r.c_seq,
            r.c_full,
            fmt_f(r.ne_ctr_mean),
            fmt_f(r.ne_ctr_stderr),
            fmt_f(r.delta_ne_mean)
        )?;
    }
    Ok(())
}

/// One row per (configuration, replicate); failed replicates carry their error.
pub fn write_runs_csv<W: Write>(mut w: W, results: &[RunResult]) -> Result<()> {
    writeln!(w, "config_id,seed,L,d,T,content,c_seq,c_full,ne_ctr,ne_cvr,delta_ne_pct,error")?;
    for r in results {
        let mut rows: Vec<(u64, String)> = r
            .runs
            .iter()
            .map(|run| {
                let delta = run.delta_ne_pct.unwrap_or(f64::NAN);
                (run.seed, format!("{},{},{},", fmt_f(run.ne[0]), fmt_f(run.ne[1]), fmt_f(delta)))
            })
            .collect();
        rows.extend(r.errors.iter().map(|(s, e)| (*s, format!(",,,\"{}\"", e.replace('"', "'")))));
        rows.sort_by_key(|(s, _)| *s);
        for (seed, tail) in rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.config_id, seed, r.layers, r.d_model, r.length, r.content, r.c_seq, r.c_full, tail
            )?;
        }
    }
    Ok(())
}
