use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use llatte_core::events::{generate_dataset, read_jsonl, write_jsonl, Dataset, Head, LabeledExample, Vocab};
use llatte_core::model::{ModelConfig, RankingModel};
use llatte_core::multistage::{evaluate_pipeline, write_update_log};
use llatte_core::numerics::{ParamStore, Tape};
use llatte_core::rng::stream;
use llatte_core::scaling::{
    composition_ablation, content_ablation, fit_results, run_grid, seq_length_sweep, width_threshold, write_results_csv,
    write_runs_csv, Axis, FitReport, RunResult, Table,
};
use llatte_core::sequence::{attention_report, write_hourly_csv, write_mass_csv, AttnProbe};
use llatte_core::trainer::{fit_model, CachedInputs};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfigFile;
use crate::error::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.json";

/// Trained ranker as written by `train` and read by `attn-probe`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

struct OutDir(PathBuf);

impl OutDir {
    fn create(path: &Path, cfg: &RunConfigFile) -> CliResult<Self> {
        fs::create_dir_all(path).map_err(|e| CliError::writing(path, e))?;
        let out = OutDir(path.to_path_buf());
        out.write(CONFIG_ECHO, cfg.to_pretty_json().as_bytes())?;
        Ok(out)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| CliError::writing(&p, e))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn write_with<F>(&self, name: &str, f: F) -> CliResult<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> llatte_core::Result<()>,
    {
        let p = self.path(name);
        let mut w = BufWriter::new(File::create(&p).map_err(|e| CliError::writing(&p, e))?);
        f(&mut w)?;
        w.flush().map_err(|e| CliError::writing(&p, e))
    }
}

fn dataset(cfg: &RunConfigFile) -> CliResult<Dataset> {
    println!(
        "generating {} users over {} days",
        cfg.generator.num_users, cfg.generator.horizon_days
    );
    Ok(generate_dataset(&cfg.generator)?)
}

fn positive_rate(examples: &[LabeledExample], head: Head) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    examples.iter().map(|e| e.labels.get(head)).sum::<f64>() / examples.len() as f64
}

#[derive(Serialize)]
struct DatasetSummary {
    num_users: usize,
    num_train: usize,
    num_eval: usize,
    ctr_rate_train: f64,
    cvr_rate_train: f64,
    vocab: Vocab,
}

pub fn generate(cfg: &RunConfigFile, out: &Path) -> CliResult<()> {
    let out = OutDir::create(out, cfg)?;
    let ds = dataset(cfg)?;
    for (name, set) in [("train.jsonl", &ds.train), ("eval.jsonl", &ds.eval)] {
        let p = out.path(name);
        write_jsonl(&p, set)?;
    }
    out.write_json(
        "summary.json",
        &DatasetSummary {
            num_users: ds.users.len(),
            num_train: ds.train.len(),
            num_eval: ds.eval.len(),
            ctr_rate_train: positive_rate(&ds.train, Head::Ctr),
            cvr_rate_train: positive_rate(&ds.train, Head::Cvr),
            vocab: cfg.generator.vocab(),
        },
    )?;
    println!("wrote {} train and {} eval examples", ds.train.len(), ds.eval.len());
    Ok(())
}

fn read_examples(path: &Path) -> CliResult<Vec<LabeledExample>> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    read_jsonl(path).map_err(|e| match e {
        llatte_core::Error::Io(io) => CliError::reading(path, io),
        other => CliError::Parse {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

#[derive(Serialize)]
struct TrainMetrics {
    ne_ctr: f64,
    ne_cvr: f64,
    c_seq: u64,
    c_full: u64,
    num_parameters: usize,
}

pub fn train(cfg: &RunConfigFile, data: &Path, out: &Path) -> CliResult<()> {
    let train_set = read_examples(&data.join("train.jsonl"))?;
    let eval_set = read_examples(&data.join("eval.jsonl"))?;
    let out = OutDir::create(out, cfg)?;
    let vocab = cfg.generator.vocab();
    println!("training on {} examples for {} steps", train_set.len(), cfg.train.steps);
    let fitted = fit_model(cfg.model(), vocab, &train_set, &eval_set, CachedInputs::default(), &cfg.train)?;
    out.write_with("train_log.csv", |w| fitted.log.write_csv(w))?;
    let ne = if eval_set.is_empty() {
        [f64::NAN; 2]
    } else {
        llatte_core::trainer::evaluate_model(&fitted.model, &fitted.params, &eval_set, None)?
    };
    out.write_json(
        "metrics.json",
        &TrainMetrics {
            ne_ctr: ne[0],
            ne_cvr: ne[1],
            c_seq: fitted.model.c_seq(),
            c_full: fitted.model.c_full(),
            num_parameters: fitted.params.num_scalars(),
        },
    )?;
    let weights = WeightsFile {
        model: fitted.model.cfg.clone(),
        vocab,
        params: fitted.params,
    };
    let s = serde_json::to_string(&weights).map_err(|e| CliError::Runtime(e.to_string()))?;
    out.write("weights.json", s.as_bytes())?;
    println!("eval NE ctr={:.6} cvr={:.6}", ne[0], ne[1]);
    Ok(())
}

fn fmt_opt(x: f64, digits: usize) -> String {
    if x.is_finite() {
        format!("{x:.digits$}")
    } else {
        "nan".into()
    }
}

fn grid_table(results: &[RunResult]) -> Table {
    let mut t = Table::new(["config", "c_seq", "c_full", "ne_ctr_mean", "ne_ctr_stderr", "delta_ne_pct", "delta_stderr"]);
    for r in results {
        t.push(vec![
            r.config_id.clone(),
            r.c_seq.to_string(),
            r.c_full.to_string(),
            fmt_opt(r.ne_ctr_mean, 6),
            fmt_opt(r.ne_ctr_stderr, 6),
            fmt_opt(r.delta_ne_mean, 4),
            fmt_opt(r.delta_ne_stderr, 4),
        ]);
    }
    t
}

#[derive(Serialize)]
struct ContentInteraction {
    shallow_depth: usize,
    deep_depth: usize,
    interaction_pct: f64,
    interaction_stderr: f64,
    per_seed: Vec<f64>,
}

pub fn scale(cfg: &RunConfigFile, out: &Path) -> CliResult<()> {
    let spec = &cfg.experiment;
    let out = OutDir::create(out, cfg)?;
    let ds = dataset(cfg)?;
    let vocab = cfg.generator.vocab();
    let base = cfg.model();
    println!("running {} sweep over {} seeds", spec.axis.name(), spec.seeds.len());
    let (results, table) = match spec.axis {
        Axis::SeqLength => {
            let sweep = seq_length_sweep(&base, &[base.seq.layers], &spec.lengths, &spec.seeds, &ds, vocab, &cfg.train)?;
            out.write_with("curves.csv", |w| sweep.write_curves_csv(w))?;
            (sweep.results.clone(), sweep.table())
        }
        Axis::Content => {
            let ab = content_ablation(&base, &spec.depths, &spec.seeds, &ds, vocab, &cfg.train)?;
            out.write_json(
                "interaction.json",
                &ContentInteraction {
                    shallow_depth: spec.depths[0],
                    deep_depth: spec.depths[spec.depths.len() - 1],
                    interaction_pct: ab.interaction,
                    interaction_stderr: ab.interaction_stderr,
                    per_seed: ab.interaction_per_seed.clone(),
                },
            )?;
            (ab.results.clone(), ab.table())
        }
        Axis::Composition => {
            let ab = composition_ablation(&base, &spec.allocations, &spec.seeds, &ds, vocab, &cfg.train)?;
            (ab.results.clone(), ab.table())
        }
        Axis::Depth | Axis::Width | Axis::Grid => {
            let results = run_grid(spec, &base, &ds, vocab, &cfg.train)?;
            let table = grid_table(&results);
            (results, table)
        }
    };
    out.write_with("results.csv", |w| write_results_csv(w, &results))?;
    out.write_with("runs.csv", |w| write_runs_csv(w, &results))?;
    let fit = fit_results(&results, spec.flops_column);
    out.write_json("fit.json", &FitReport::new(spec.axis, spec.flops_column, &fit))?;
    if spec.axis == Axis::Grid {
        if let Ok(th) = width_threshold(&results, spec.flops_column) {
            out.write_json("width_threshold.json", &th)?;
        }
    }
    let mut rendered = table.render();
    rendered.push('\n');
    out.write("table.txt", rendered.as_bytes())?;
    print!("{rendered}");
    let failed: Vec<&str> = results.iter().filter(|r| r.failed()).map(|r| r.config_id.as_str()).collect();
    if !failed.is_empty() {
        println!("configs with failed runs: {}", failed.join(", "));
    }
    Ok(())
}

pub fn multistage(cfg: &RunConfigFile, out: &Path) -> CliResult<()> {
    let out = OutDir::create(out, cfg)?;
    let ds = dataset(cfg)?;
    println!("evaluating two-stage pipeline (d_transfer={})", cfg.pipeline.d_transfer);
    let outcome = evaluate_pipeline(&cfg.pipeline, &ds, cfg.generator.vocab(), &cfg.train)?;
    out.write_json("report.json", &outcome.report)?;
    out.write_with("update_log.csv", |w| write_update_log(w, &outcome.update_log))?;
    println!(
        "delta NE up {:.4}%  down {:.4}%  tau {}%",
        outcome.report.delta_ne_up_pct, outcome.report.delta_ne_down_pct, outcome.report.tau_display_pct
    );
    Ok(())
}

fn load_weights(path: &Path) -> CliResult<WeightsFile> {
    let text = fs::read_to_string(path).map_err(|e| CliError::reading(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Serialize)]
struct ProbeLayerSummary {
    layer: usize,
    rows_used: usize,
    rows_excluded: usize,
    max_row_sum_error: f64,
}

fn max_row_sum_error(probes: &[AttnProbe], layer: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for p in probes {
        let Some(lp) = p.layers.get(layer) else { continue };
        for h in &lp.heads {
            for i in 0..h.rows() {
                let s: f64 = h.row(i).iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    worst
}

pub fn attn_probe(cfg: &RunConfigFile, weights: &Path, examples: usize, out: &Path) -> CliResult<()> {
    let w = load_weights(weights)?;
    if w.vocab != cfg.generator.vocab() {
        return Err(CliError::Invariant(
            "weights were trained on a different vocabulary than the generator config".into(),
        ));
    }
    if examples == 0 {
        return Err(CliError::Invariant("--examples must be positive".into()));
    }
    let mut params = ParamStore::new();
    let model = RankingModel::new(&mut params, w.model.clone(), w.vocab)?;
    params.load_values(&w.params)?;
    let out = OutDir::create(out, cfg)?;
    let ds = dataset(cfg)?;
    let mut order: Vec<usize> = (0..ds.eval.len()).collect();
    order.shuffle(&mut stream(cfg.seed, "probe", 0));
    order.truncate(examples);
    order.sort_unstable();
    println!("probing attention on {} eval examples", order.len());
    let probes: Vec<AttnProbe> = order
        .par_iter()
        .map(|&i| {
            let mut tape = Tape::new(&params);
            let o = model.forward(&mut tape, &ds.eval[i], None, true)?;
            Ok(o.probe)
        })
        .collect::<llatte_core::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if probes.is_empty() {
        return Err(CliError::Invariant("model produces no attention probes (upstream models are not probed)".into()));
    }
    let mut summary = Vec::new();
    for layer in 0..model.cfg.seq.layers {
        let report = attention_report(&probes, layer);
        out.write_with(&format!("attention_mass_layer{layer}.csv"), |f| write_mass_csv(&report, f))?;
        out.write_with(&format!("attention_hourly_layer{layer}.csv"), |f| write_hourly_csv(&report, f))?;
        summary.push(ProbeLayerSummary {
            layer,
            rows_used: report.rows_used,
            rows_excluded: report.rows_excluded,
            max_row_sum_error: max_row_sum_error(&probes, layer),
        });
    }
    out.write_json("probe_summary.json", &summary)?;
    Ok(())
}
