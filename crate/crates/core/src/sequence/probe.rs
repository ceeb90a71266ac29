use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::Tensor;

/// Attention captured in one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    /// Global position of the first attended column.
    pub col_offset: usize,
    /// Global position of the first surviving row.
    pub row_offset: usize,
    /// One `rows x cols` matrix per head.
    pub heads: Vec<Tensor>,
}

/// Attention matrices of a single forward pass. Global positions
/// `0..event_times.len()` are events (oldest first); the rest are query tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnProbe {
    pub request_time_s: u64,
    pub event_times: Vec<u64>,
    pub layers: Vec<LayerProbe>,
}

impl AttnProbe {
    pub fn num_events(&self) -> usize {
        self.event_times.len()
    }
}

/// Attention mass of query-token rows over event columns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    /// `recent_mass[k - 1]`: mean mass on the `k` most recent events.
    pub recent_mass: Vec<f64>,
    /// `topk_mass[k - 1]`: mean mass of the `k` largest entries.
    pub topk_mass: Vec<f64>,
    /// Hours before the request → mean per-row mass in that bucket.
    pub hourly_total: BTreeMap<u64, f64>,
    /// Hours before the request → mass per (row, event) pair in that bucket.
    pub hourly_per_event: BTreeMap<u64, f64>,
    pub rows_used: usize,
    pub rows_excluded: usize,
}

/// Aggregates query-row attention from `layer` of each probe.
pub fn attention_report(probes: &[AttnProbe], layer: usize) -> AttentionReport {
    let mut rows: Vec<(Vec<f64>, Vec<u64>)> = Vec::new();
    let mut excluded = 0;
    for probe in probes {
        let Some(lp) = probe.layers.get(layer) else { continue };
        let t = probe.num_events();
        for head in &lp.heads {
            for i in 0..head.rows() {
                if lp.row_offset + i < t {
                    continue;
                }
                let row = head.row(i);
                let ev_cols = t.saturating_sub(lp.col_offset).min(row.len());
                let mass: Vec<f64> = row[..ev_cols].to_vec();
                let total: f64 = mass.iter().sum();
                if total <= 0.0 {
                    excluded += 1;
                    continue;
                }
                let ages = probe.event_times[lp.col_offset..lp.col_offset + ev_cols]
                    .iter()
                    .map(|&tau| probe.request_time_s.saturating_sub(tau) / 3600)
                    .collect();
                rows.push((mass.iter().map(|m| m / total).collect(), ages));
            }
        }
    }
    let kmax = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let mut recent = vec![0.0; kmax];
    let mut topk = vec![0.0; kmax];
    let mut totals: BTreeMap<u64, f64> = BTreeMap::new();
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for (mass, ages) in &rows {
        let mut sorted = mass.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let (mut acc_r, mut acc_t) = (0.0, 0.0);
        for k in 0..kmax {
            if k < mass.len() {
                acc_r += mass[mass.len() - 1 - k];
                acc_t += sorted[k];
            }
            recent[k] += acc_r;
            topk[k] += acc_t;
        }
        for (&m, &age) in mass.iter().zip(ages) {
            *totals.entry(age).or_default() += m;
            *counts.entry(age).or_default() += 1;
        }
    }
    let n = rows.len().max(1) as f64;
    recent.iter_mut().chain(topk.iter_mut()).for_each(|v| *v /= n);
    let hourly_per_event = totals
        .iter()
        .map(|(&b, &m)| (b, m / counts[&b] as f64))
        .collect();
    let hourly_total = totals.into_iter().map(|(b, m)| (b, m / n)).collect();
    AttentionReport {
        recent_mass: recent,
        topk_mass: topk,
        hourly_total,
        hourly_per_event,
        rows_used: rows.len(),
        rows_excluded: excluded,
    }
}

/// Writes `k,recent_mass,topk_mass`.
pub fn write_mass_csv<W: Write>(report: &AttentionReport, mut w: W) -> Result<()> {
    writeln!(w, "k,recent_mass,topk_mass")?;
    for (k, (r, t)) in report.recent_mass.iter().zip(&report.topk_mass).enumerate() {
        writeln!(w, "{},{r:.8},{t:.8}", k + 1)?;
    }
    Ok(())
}

/// Writes `bucket_hours,total_mass,mean_mass_per_event`.
pub fn write_hourly_csv<W: Write>(report: &AttentionReport, mut w: W) -> Result<()> {
    writeln!(w, "bucket_hours,total_mass,mean_mass_per_event")?;
    for (b, total) in &report.hourly_total {
        writeln!(w, "{b},{total:.8},{:.8}", report.hourly_per_event[b])?;
    }
    Ok(())
}
