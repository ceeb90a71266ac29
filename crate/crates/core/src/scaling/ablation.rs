use std::io::Write;

use serde::{Deserialize, Serialize};

use super::fit::fit_scaling_law;
use super::grid::{mean_stderr, pooled_stderr, run_configs, RunResult};
use super::spec::{Allocation, Axis, ExperimentSpec, RunConfig};
use super::table::Table;
use crate::backbone::delta_ne;
use crate::error::{Error, Result};
use crate::events::{Dataset, Vocab};
use crate::model::{ModelConfig, SeqPolicy};
use crate::multistage::{display_percent, evaluate_variant, transfer_ratio, PipelineConfig};
use crate::trainer::TrainConfig;

fn fmt_pct(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        "failed".into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub views: usize,
    pub conversions: usize,
    pub delta_ne_mean: f64,
    pub delta_ne_stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositionAblation {
    pub rows: Vec<CompositionRow>,
    pub results: Vec<RunResult>,
}

impl CompositionAblation {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["allocation", "views", "conversions", "delta_ne_pct", "stderr"]);
        for r in &self.rows {
            t.push(vec![
                format!("{}/{}", r.views, r.conversions),
                r.views.to_string(),
                r.conversions.to_string(),
                fmt_pct(r.delta_ne_mean),
                fmt_pct(r.delta_ne_stderr),
            ]);
        }
        t
    }
}

/// ΔNE of each views/conversions split of a fixed budget against the
/// balanced split, in the given order.
pub fn composition_ablation(
    base: &ModelConfig,
    allocations: &[Allocation],
    seeds: &[u64],
    ds: &Dataset,
    vocab: Vocab,
    train: &TrainConfig,
) -> Result<CompositionAblation> {
    let budgets: Vec<usize> = allocations.iter().map(|a| a.views + a.conversions).collect();
    if budgets.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config(format!("allocations must share one sequence budget, got {budgets:?}")));
    }
    let spec = ExperimentSpec {
        axis: Axis::Composition,
        allocations: allocations.to_vec(),
        seeds: seeds.to_vec(),
        policy: base.policy.clone(),
        ..ExperimentSpec::default()
    };
    let configs = spec.configs(base)?;
    let baseline = spec.baseline_id(&configs)?;
    let results = run_configs(&configs, &baseline, seeds, ds, vocab, train)?;
    let rows = allocations
        .iter()
        .zip(&results)
        .map(|(a, r)| CompositionRow {
            views: a.views,
            conversions: a.conversions,
            delta_ne_mean: r.delta_ne_mean,
            delta_ne_stderr: r.delta_ne_stderr,
        })
        .collect();
    Ok(CompositionAblation { rows, results })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentRow {
    pub depth: usize,
    pub id_only: f64,
    pub with_content: f64,
    /// `ΔNE(id only) - ΔNE(with content)`: positive when content helps.
    pub gain: f64,
    pub gain_stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContentAblation {
    pub rows: Vec<ContentRow>,
    /// Content gain at the deepest minus the shallowest depth, per seed.
    pub interaction_per_seed: Vec<f64>,
    pub interaction: f64,
    pub interaction_stderr: f64,
    pub results: Vec<RunResult>,
}

impl ContentAblation {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["depth", "id_only", "with_content", "content_gain", "gain_stderr"]);
        for r in &self.rows {
            t.push(vec![
                r.depth.to_string(),
                fmt_pct(r.id_only),
                fmt_pct(r.with_content),
                fmt_pct(r.gain),
                fmt_pct(r.gain_stderr),
            ]);
        }
        t.push(vec![
            "interaction".into(),
            String::new(),
            String::new(),
            fmt_pct(self.interaction),
            fmt_pct(self.interaction_stderr),
        ]);
        t
    }
}

fn per_seed_gain(id_only: &RunResult, content: &RunResult) -> Result<Vec<(u64, f64)>> {
    let mut out = Vec::new();
    for a in &id_only.runs {
        if let Some(b) = content.runs.iter().find(|b| b.seed == a.seed) {
            // positive when the content arm has the lower NE
            out.push((a.seed, -delta_ne(b.ne[0], a.ne[0])?));
        }
    }
    Ok(out)
}

/// Depths x {id only, with content}; ΔNE against the shallowest id-only arm.
pub fn content_ablation(
    base: &ModelConfig,
    depths: &[usize],
    seeds: &[u64],
    ds: &Dataset,
    vocab: Vocab,
    train: &TrainConfig,
) -> Result<ContentAblation> {
    if depths.len() < 2 {
        return Err(Error::Config("content ablation needs at least two depths".into()));
    }
    let spec = ExperimentSpec {
        axis: Axis::Content,
        depths: depths.to_vec(),
        seeds: seeds.to_vec(),
        policy: base.policy.clone(),
        ..ExperimentSpec::default()
    };
    let configs = spec.configs(base)?;
    let baseline = spec.baseline_id(&configs)?;
    let results = run_configs(&configs, &baseline, seeds, ds, vocab, train)?;
    let mut rows = Vec::new();
    let mut gains = Vec::new();
    for (i, &depth) in depths.iter().enumerate() {
        let (id, ct) = (&results[2 * i], &results[2 * i + 1]);
        let g = per_seed_gain(id, ct)?;
        let (gain, gain_stderr) = mean_stderr(&g.iter().map(|x| x.1).collect::<Vec<_>>());
        rows.push(ContentRow {
            depth,
            id_only: id.delta_ne_mean,
            with_content: ct.delta_ne_mean,
            gain,
            gain_stderr,
        });
        gains.push(g);
    }
    let (shallow, deep) = (&gains[0], &gains[gains.len() - 1]);
    let interaction_per_seed: Vec<f64> = deep
        .iter()
        .filter_map(|(s, g)| shallow.iter().find(|x| x.0 == *s).map(|x| g - x.1))
        .collect();
    let (interaction, interaction_stderr) = mean_stderr(&interaction_per_seed);
    Ok(ContentAblation {
        rows,
        interaction_per_seed,
        interaction,
        interaction_stderr,
        results,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub depth: usize,
    pub length: usize,
    pub seed: u64,
    pub ne_ctr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthCurve {
    pub depth: usize,
    pub lengths: Vec<usize>,
    pub ne_mean: Vec<f64>,
    pub ne_stderr: Vec<f64>,
    /// Mean NE never increases with T.
    pub monotone: bool,
    /// NE decrease per decade of T; absent with a single length.
    pub slope: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqLengthSweep {
    pub points: Vec<CurvePoint>,
    pub curves: Vec<DepthCurve>,
    pub results: Vec<RunResult>,
}

impl SeqLengthSweep {
    pub fn write_curves_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "depth,T,seed,ne_ctr")?;
        for p in &self.points {
            writeln!(w, "{},{},{},{:.8}", p.depth, p.length, p.seed, p.ne_ctr)?;
        }
        Ok(())
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["depth", "T", "ne_ctr_mean", "ne_ctr_stderr"]);
        for c in &self.curves {
            for ((l, m), s) in c.lengths.iter().zip(&c.ne_mean).zip(&c.ne_stderr) {
                t.push(vec![c.depth.to_string(), l.to_string(), format!("{m:.6}"), format!("{s:.6}")]);
            }
        }
        t
    }

    /// `NE(short) - NE(long)` for `depth`, with its pooled stderr.
    pub fn gap(&self, depth: usize, short: usize, long: usize) -> Option<(f64, f64)> {
        let c = self.curves.iter().find(|c| c.depth == depth)?;
        let i = c.lengths.iter().position(|&l| l == short)?;
        let j = c.lengths.iter().position(|&l| l == long)?;
        Some((c.ne_mean[i] - c.ne_mean[j], pooled_stderr(c.ne_stderr[i], c.ne_stderr[j])))
    }
}

/// NE as a function of the history length for each depth.
pub fn seq_length_sweep(
    base: &ModelConfig,
    depths: &[usize],
    lengths: &[usize],
    seeds: &[u64],
    ds: &Dataset,
    vocab: Vocab,
    train: &TrainConfig,
) -> Result<SeqLengthSweep> {
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sequence lengths must be nonempty and strictly ascending".into()));
    }
    if depths.is_empty() {
        return Err(Error::Config("sequence-length sweep needs at least one depth".into()));
    }
    let configs: Vec<RunConfig> = depths
        .iter()
        .flat_map(|&l| {
            lengths.iter().map(move |&t| {
                let mut m = base.clone();
                m.seq.layers = l;
                m.seq.schedule = None;
                m.policy = SeqPolicy::Recent { length: t };
                RunConfig::new(m)
            })
        })
        .collect();
    let baseline = configs[0].id.clone();
    let results = run_configs(&configs, &baseline, seeds, ds, vocab, train)?;
    let mut points = Vec::new();
    let mut curves = Vec::new();
    for (di, &depth) in depths.iter().enumerate() {
        let rs = &results[di * lengths.len()..(di + 1) * lengths.len()];
        for (r, &t) in rs.iter().zip(lengths) {
            points.extend(r.runs.iter().map(|run| CurvePoint {
                depth,
                length: t,
                seed: run.seed,
                ne_ctr: run.ne[0],
            }));
        }
        let ne_mean: Vec<f64> = rs.iter().map(|r| r.ne_ctr_mean).collect();
        let ne_stderr: Vec<f64> = rs.iter().map(|r| r.ne_ctr_stderr).collect();
        let slope = if lengths.len() > 1 {
            let pts: Vec<(f64, f64)> = lengths.iter().zip(&ne_mean).map(|(&t, &m)| (t as f64, m)).collect();
            fit_scaling_law(&pts).ok().map(|f| f.alpha)
        } else {
            None
        };
        curves.push(DepthCurve {
            depth,
            lengths: lengths.to_vec(),
            monotone: ne_mean.windows(2).all(|w| w[1] <= w[0]),
            ne_mean,
            ne_stderr,
            slope,
        });
    }
    Ok(SeqLengthSweep { points, curves, results })
}

/// Relative gap allowed between the sequence budgets of an iso-FLOPs pair.
pub const ISO_FLOPS_TOLERANCE: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoRow {
    pub label: String,
    pub c_seq: u64,
    pub delta_ne_up_pct: f64,
    pub delta_ne_down_pct: f64,
}

impl IsoRow {
    /// Transfer ratio, undefined when the upstream delta is zero.
    pub fn tau(&self) -> Result<f64> {
        transfer_ratio(self.delta_ne_up_pct, self.delta_ne_down_pct)
    }
}

/// Upstream-vs-downstream deltas laid out as in a transfer-ratio table.
pub fn iso_table(rows: &[IsoRow]) -> Table {
    let mut t = Table::new(["Configuration", "ΔNE upstream (%)", "ΔNE downstream (%)", "τ (%)"]);
    for r in rows {
        let tau = r.tau().map_or_else(|_| "undefined".to_string(), |t| display_percent(t).to_string());
        t.push(vec![
            r.label.clone(),
            format!("{:.2}", r.delta_ne_up_pct),
            format!("{:.2}", r.delta_ne_down_pct),
            tau,
        ]);
    }
    t
}

pub fn check_iso_flops(a: u64, b: u64) -> Result<()> {
    let hi = a.max(b) as f64;
    if hi > 0.0 && (a as f64 - b as f64).abs() / hi > ISO_FLOPS_TOLERANCE {
        return Err(Error::FlopsMismatch { a, b });
    }
    Ok(())
}

/// Trains two matched-budget upstream configurations against the pipeline's
/// upstream baseline and reports each one's transfer.
pub fn iso_flops_compare(
    pcfg: &PipelineConfig,
    a: (&str, &ModelConfig),
    b: (&str, &ModelConfig),
    ds: &Dataset,
    vocab: Vocab,
    train: &TrainConfig,
) -> Result<Vec<IsoRow>> {
    let flops = |m: &ModelConfig| super::grid::config_flops(&pcfg.as_upstream(m), vocab).map(|f| f.0);
    let (ca, cb) = (flops(a.1)?, flops(b.1)?);
    check_iso_flops(ca, cb)?;
    let (base, (va, vb)) = rayon::join(
        || evaluate_variant(pcfg, &pcfg.upstream_baseline, "baseline", ds, vocab, train),
        || {
            rayon::join(
                || evaluate_variant(pcfg, a.1, a.0, ds, vocab, train),
                || evaluate_variant(pcfg, b.1, b.0, ds, vocab, train),
            )
        },
    );
    let base = base?;
    let mut rows = Vec::new();
    for ((label, _), v, c) in [(a, va?, ca), (b, vb?, cb)] {
        rows.push(IsoRow {
            label: label.to_string(),
            c_seq: c,
            delta_ne_up_pct: delta_ne(v.ne_up, base.ne_up)?,
            delta_ne_down_pct: delta_ne(v.ne_down, base.ne_down)?,
        });
    }
    Ok(rows)
}
