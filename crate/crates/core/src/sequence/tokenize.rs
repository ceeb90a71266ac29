use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::events::{ActionEvent, ActionType, Candidate, RequestContext, Vocab};
use crate::numerics::{Tape, Tensor, Var};

use super::config::{QueryMode, SeqConfig};
use super::weights::{QueryWeights, TokenizerWeights, HOURS_PER_DAY, USER_FEATURES};

/// Number of (sin, cos) pairs in the timestamp encoding.
pub const TIME_PAIRS: usize = 8;
const SECONDS_PER_HOUR: f64 = 3600.0;
const MAX_PERIOD_HOURS: f64 = 90.0 * 24.0;

/// Encoding periods in hours: geometric from 1 h to 90 d, with the entry
/// closest to one day replaced by exactly 24 h.
pub fn time_periods_hours() -> [f64; TIME_PAIRS] {
    let mut p = [0.0; TIME_PAIRS];
    for (k, v) in p.iter_mut().enumerate() {
        *v = MAX_PERIOD_HOURS.powf(k as f64 / (TIME_PAIRS - 1) as f64);
    }
    let pin = (0..TIME_PAIRS)
        .min_by(|&a, &b| (p[a].ln() - 24f64.ln()).abs().total_cmp(&(p[b].ln() - 24f64.ln()).abs()))
        .unwrap_or(0);
    p[pin] = 24.0;
    p
}

/// Index of the pair pinned to the daily period.
pub fn daily_pair() -> usize {
    time_periods_hours().iter().position(|&p| p == 24.0).unwrap_or(0)
}

/// Full 16-value encoding of an age `delta_s`, laid out as sin/cos per pair.
pub fn time_features(delta_s: f64) -> [f64; 2 * TIME_PAIRS] {
    let mut out = [0.0; 2 * TIME_PAIRS];
    for (k, p) in time_periods_hours().iter().enumerate() {
        let phase = 2.0 * PI * delta_s / (p * SECONDS_PER_HOUR);
        out[2 * k] = phase.sin();
        out[2 * k + 1] = phase.cos();
    }
    out
}

/// Additive encoding of event time `tau` relative to `request_time`, one
/// value per entry of `dims` (pairs are consumed in order).
pub fn time_encode(tau: u64, request_time: u64, dims: &[usize]) -> Result<Vec<f64>> {
    if tau > request_time {
        return Err(Error::Invalid(format!(
            "event time {tau} is after the reference time {request_time}"
        )));
    }
    let f = time_features((request_time - tau) as f64);
    Ok(f.iter().take(dims.len()).copied().collect())
}

fn hour_of_day(t: u64) -> usize {
    ((t / 3600) % HOURS_PER_DAY as u64) as usize
}

fn check_ids(table: &'static str, ids: &[usize], size: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= size) {
        Some(&id) => Err(Error::IdOutOfRange { table, id, size }),
        None => Ok(()),
    }
}

fn content_row(v: Option<&[f64]>, dc: usize, enabled: bool) -> Result<Option<Vec<f64>>> {
    match v {
        Some(c) if enabled => {
            if c.len() != dc {
                return Err(Error::Schema {
                    field: "content".into(),
                    detail: format!("expected {dc} values, got {}", c.len()),
                });
            }
            Ok(Some(c.to_vec()))
        }
        _ => Ok(None),
    }
}

/// Embeds events into `T x d` tokens, oldest first, with timestamp
/// encodings relative to `reference_time` added on the configured dims.
pub fn tokenize(
    tape: &mut Tape,
    events: &[ActionEvent],
    w: &TokenizerWeights,
    cfg: &SeqConfig,
    vocab: &Vocab,
    reference_time: u64,
) -> Result<Var> {
    let d = cfg.d_model;
    let t = events.len();
    let items: Vec<usize> = events.iter().map(|e| e.item_id).collect();
    let surfaces: Vec<usize> = events.iter().map(|e| e.surface_id).collect();
    let metas: Vec<usize> = events.iter().map(|e| e.meta_id).collect();
    check_ids("item", &items, vocab.n_items)?;
    check_ids("surface", &surfaces, vocab.n_surfaces)?;
    check_ids("meta", &metas, vocab.n_meta)?;
    let dims = cfg.time_dims();
    let mut enc = Tensor::zeros(&[t, d]);
    for (i, e) in events.iter().enumerate() {
        let v = time_encode(e.timestamp_s, reference_time, &dims)?;
        let row = enc.row_mut(i);
        for (&dim, x) in dims.iter().zip(v) {
            row[dim] += x;
        }
    }
    if t == 0 {
        return Ok(tape.constant(enc));
    }

    let types: Vec<usize> = events.iter().map(|e| e.action_type.index()).collect();
    let hours: Vec<usize> = events.iter().map(|e| hour_of_day(e.timestamp_s)).collect();
    let dc = vocab.d_content;
    let mut content = Tensor::zeros(&[t, dc]);
    let mut missing = Tensor::zeros(&[t, 1]);
    for (i, e) in events.iter().enumerate() {
        match content_row(e.content_vec.as_deref(), dc, cfg.use_content)? {
            Some(c) => content.row_mut(i).copy_from_slice(&c),
            None => missing.row_mut(i)[0] = 1.0,
        }
    }

    let table = |tape: &mut Tape, id, ids: &[usize]| {
        let tv = tape.param(id);
        tape.gather(tv, ids)
    };
    let e_type = table(tape, w.e_type, &types)?;
    let e_item = table(tape, w.e_item, &items)?;
    let e_surface = table(tape, w.e_surface, &surfaces)?;
    let e_time = table(tape, w.e_time, &hours)?;
    let e_meta = table(tape, w.e_meta, &metas)?;
    let miss = tape.constant(missing);
    let miss_tab = tape.param(w.e_missing);
    let miss_emb = tape.matmul(miss, miss_tab)?;
    let e_meta = tape.add(e_meta, miss_emb)?;
    let content = tape.constant(content);
    let x = tape.concat_cols(&[e_type, e_item, e_surface, e_time, e_meta, content])?;
    let h = mlp_act(tape, x, w)?;
    let enc = tape.constant(enc);
    tape.add(h, enc)
}

fn mlp_act(tape: &mut Tape, x: Var, w: &TokenizerWeights) -> Result<Var> {
    let w1 = tape.param(w.w1);
    let b1 = tape.param(w.b1);
    let w2 = tape.param(w.w2);
    let b2 = tape.param(w.b2);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.silu(h);
    let h = tape.matmul(h, w2)?;
    tape.add_row(h, b2)
}

/// Inputs to the query-token projection.
#[derive(Clone, Copy, Debug)]
pub enum QueryInput<'a> {
    Candidate {
        candidate: &'a Candidate,
        context: &'a RequestContext,
        cross_features: &'a [f64],
    },
    /// User-level summary at `reference_time_s`; no candidate information.
    User { reference_time_s: u64 },
}

impl QueryInput<'_> {
    pub fn reference_time(&self) -> u64 {
        match self {
            QueryInput::Candidate { context, .. } => context.request_time_s,
            QueryInput::User { reference_time_s } => *reference_time_s,
        }
    }
}

/// Hand-built user features: activity volume, action mix, and hour of day.
pub fn user_features(events: &[ActionEvent], reference_time: u64) -> [f64; USER_FEATURES] {
    let n = events.len() as f64;
    let frac = |a: ActionType| {
        if events.is_empty() {
            0.0
        } else {
            events.iter().filter(|e| e.action_type == a).count() as f64 / n
        }
    };
    let phase = 2.0 * PI * hour_of_day(reference_time) as f64 / HOURS_PER_DAY as f64;
    [
        n.ln_1p() / 8.0,
        frac(ActionType::Click),
        frac(ActionType::Conversion),
        frac(ActionType::Organic),
        phase.sin(),
        phase.cos(),
    ]
}

/// Builds the `n_q x d` query tokens: projected features plus learned seeds.
pub fn query_tokens(
    tape: &mut Tape,
    events: &[ActionEvent],
    input: &QueryInput,
    item_table: Var,
    w: &QueryWeights,
    cfg: &SeqConfig,
    vocab: &Vocab,
) -> Result<Var> {
    let feat = match (cfg.mode, input) {
        (QueryMode::CandidateAware, QueryInput::Candidate { candidate, context, cross_features }) => {
            check_ids("item", &[candidate.ad_id], vocab.n_items)?;
            check_ids("advertiser", &[candidate.advertiser_id], vocab.n_advertisers)?;
            check_ids("surface", &[context.surface_id], vocab.n_surfaces)?;
            check_ids("device", &[context.device_id], vocab.n_devices)?;
            let missing = |name: &str| Error::Config(format!("query table {name} not registered"));
            let adv = w.e_advertiser.ok_or_else(|| missing("advertiser"))?;
            let surf = w.e_surface.ok_or_else(|| missing("surface"))?;
            let dev = w.e_device.ok_or_else(|| missing("device"))?;
            let item = tape.gather(item_table, &[candidate.ad_id])?;
            let adv = tape.param(adv);
            let adv = tape.gather(adv, &[candidate.advertiser_id])?;
            let surf = tape.param(surf);
            let surf = tape.gather(surf, &[context.surface_id])?;
            let dev = tape.param(dev);
            let dev = tape.gather(dev, &[context.device_id])?;
            let hour = tape.param(w.e_hour);
            let hour = tape.gather(hour, &[hour_of_day(context.request_time_s)])?;
            let content = content_row(Some(&candidate.content_vec), vocab.d_content, cfg.use_content)?
                .unwrap_or_else(|| vec![0.0; vocab.d_content]);
            let content = tape.constant(Tensor::row_vector(content));
            let cross = tape.constant(Tensor::row_vector(cross_features.to_vec()));
            tape.concat_cols(&[item, adv, surf, dev, hour, content, cross])?
        }
        (QueryMode::UserOnly, QueryInput::User { reference_time_s }) => {
            let f = tape.constant(Tensor::row_vector(user_features(events, *reference_time_s).to_vec()));
            let hour = tape.param(w.e_hour);
            let hour = tape.gather(hour, &[hour_of_day(*reference_time_s)])?;
            tape.concat_cols(&[f, hour])?
        }
        (mode, _) => {
            return Err(Error::Config(format!("query input does not match mode {mode:?}")));
        }
    };
    let proj = tape.param(w.proj);
    let q = tape.matmul(feat, proj)?;
    let q = tape.reshape(q, vec![cfg.query_tokens, cfg.d_model])?;
    let seeds = tape.param(w.seeds);
    tape.add(q, seeds)
}

/// Appends query tokens after the sequence tokens.
pub fn fuse_query_tokens(tape: &mut Tape, x_seq: Var, q: Var) -> Result<Var> {
    let (xs, qs) = (tape.value(x_seq), tape.value(q));
    if xs.cols() != qs.cols() {
        return Err(Error::Shape {
            op: "fuse_query_tokens",
            left: xs.shape().to_vec(),
            right: qs.shape().to_vec(),
        });
    }
    match (xs.rows(), qs.rows()) {
        (0, _) => Ok(q),
        (_, 0) => Ok(x_seq),
        _ => tape.concat_rows(&[x_seq, q]),
    }
}
