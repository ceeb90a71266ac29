//! Synthetic user event streams with planted recency, long-range conversion,
//! daily-seasonality and content-match structure.
//!
//! Each user carries two latent directions in content space: a drifting
//! browsing interest that drives most impressions, and a stable conversion
//! intent that drives which clicked items convert. Request labels depend on the
//! candidate's similarity to the recent-event mean (short context), to the
//! mean of conversions inside a long look-back window (long context), and on
//! whether the request falls in the user's active hour of day.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::types::*;
use crate::error::{Error, Result};
use crate::numerics::kernels::{dot, sigmoid};
use crate::rng;

pub const SECONDS_PER_HOUR: u64 = 3600;
pub const SECONDS_PER_DAY: u64 = 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_users: usize,
    pub horizon_days: u64,
    pub events_per_day: f64,
    /// Probability that a click on an intent-aligned item converts.
    pub conversion_fraction: f64,
    pub d_content: usize,
    pub seasonality_amplitude: f64,
    pub long_range_days: u64,
    /// Number of most recent events in the short-context label term.
    pub recent_window: usize,
    pub target_positive_rate: f64,
    pub noise_scale: f64,
    pub seed: u64,
    pub num_items: usize,
    pub num_topics: usize,
    pub num_surfaces: usize,
    pub num_devices: usize,
    pub num_advertisers: usize,
    pub requests_per_user: usize,
    pub eval_fraction: f64,
    /// Longest history snapshot stored per example.
    pub max_history: usize,
    pub click_rate: f64,
    pub organic_fraction: f64,
    /// Share of impressions drawn from the conversion-intent topics.
    pub intent_share: f64,
    pub content_coverage: f64,
    pub interest_drift: f64,
    pub topic_sharpness: f64,
    pub item_spread: f64,
    pub w_recent: f64,
    pub w_long: f64,
    pub w_phase: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_users: 400,
            horizon_days: 40,
            events_per_day: 16.0,
            conversion_fraction: 0.5,
            d_content: 16,
            seasonality_amplitude: 0.6,
            long_range_days: 16,
            recent_window: 16,
            target_positive_rate: 0.25,
            noise_scale: 0.5,
            seed: 0,
            num_items: 2000,
            num_topics: 32,
            num_surfaces: 4,
            num_devices: 3,
            num_advertisers: 50,
            requests_per_user: 10,
            eval_fraction: 0.25,
            max_history: 1024,
            click_rate: 0.15,
            organic_fraction: 0.1,
            intent_share: 0.3,
            content_coverage: 1.0,
            interest_drift: 0.25,
            topic_sharpness: 6.0,
            item_spread: 0.6,
            w_recent: 1.5,
            w_long: 2.5,
            w_phase: 0.75,
        }
    }
}

/// Vocabulary sizes a model needs to embed generated data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_items: usize,
    pub n_surfaces: usize,
    pub n_meta: usize,
    pub n_devices: usize,
    pub n_advertisers: usize,
    pub d_content: usize,
}

impl GeneratorConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_items: self.num_items,
            n_surfaces: self.num_surfaces,
            n_meta: self.num_topics,
            n_devices: self.num_devices,
            n_advertisers: self.num_advertisers,
            d_content: self.d_content,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("conversion_fraction", self.conversion_fraction),
            ("target_positive_rate", self.target_positive_rate),
            ("eval_fraction", self.eval_fraction),
            ("click_rate", self.click_rate),
        ];
        for (name, r) in rates {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("generator.{name} must be in (0,1), got {r}")));
            }
        }
        let unit = [
            ("organic_fraction", self.organic_fraction),
            ("intent_share", self.intent_share),
            ("content_coverage", self.content_coverage),
        ];
        for (name, r) in unit {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("generator.{name} must be in [0,1], got {r}")));
            }
        }
        if !(0.0..=1.0).contains(&self.seasonality_amplitude) {
            return Err(Error::Config("generator.seasonality_amplitude must be in [0,1]".into()));
        }
        if self.num_users == 0 || self.num_items == 0 || self.num_topics == 0 || self.d_content == 0 {
            return Err(Error::Config("generator sizes must be positive".into()));
        }
        if self.num_surfaces == 0 || self.num_devices == 0 || self.num_advertisers == 0 {
            return Err(Error::Config("generator vocabularies must be nonempty".into()));
        }
        if self.long_range_days >= self.horizon_days {
            return Err(Error::Config("generator.long_range_days must be below horizon_days".into()));
        }
        if self.events_per_day <= 0.0 || self.noise_scale < 0.0 {
            return Err(Error::Config("generator rates must be positive".into()));
        }
        Ok(())
    }
}

/// Item content and metadata shared by all users.
#[derive(Clone, Debug)]
pub struct Catalog {
    pub topic_centroids: Vec<Vec<f64>>,
    pub item_content: Vec<ContentVec>,
    pub item_topic: Vec<usize>,
    pub item_advertiser: Vec<usize>,
    items_by_topic: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<LabeledExample>,
    pub eval: Vec<LabeledExample>,
    /// Full per-user streams, indexed by user id.
    pub users: Vec<UserHistory>,
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn unit_noise(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    normalize(&mut v);
    v
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn build_catalog(cfg: &GeneratorConfig) -> Catalog {
    let mut rng = rng::stream(cfg.seed, "catalog", 0);
    let d = cfg.d_content;
    let topic_centroids: Vec<Vec<f64>> = (0..cfg.num_topics).map(|_| unit_noise(&mut rng, d)).collect();
    let mut item_content = Vec::with_capacity(cfg.num_items);
    let mut item_topic = Vec::with_capacity(cfg.num_items);
    let mut item_advertiser = Vec::with_capacity(cfg.num_items);
    let mut items_by_topic = vec![Vec::new(); cfg.num_topics];
    for i in 0..cfg.num_items {
        let topic = i % cfg.num_topics;
        let noise = unit_noise(&mut rng, d);
        let mut v: Vec<f64> = topic_centroids[topic]
            .iter()
            .zip(&noise)
            .map(|(c, n)| c + cfg.item_spread * n)
            .collect();
        normalize(&mut v);
        let v: Vec<f64> = v.into_iter().map(round_sig9).collect();
        item_content.push(Arc::from(v));
        item_topic.push(topic);
        item_advertiser.push(rng.random_range(0..cfg.num_advertisers));
        items_by_topic[topic].push(i);
    }
    Catalog {
        topic_centroids,
        item_content,
        item_topic,
        item_advertiser,
        items_by_topic,
    }
}

impl Catalog {
    fn topic_weights(&self, direction: &[f64], sharpness: f64) -> WeightedIndex<f64> {
        let w: Vec<f64> = self
            .topic_centroids
            .iter()
            .map(|c| (sharpness * dot(c, direction)).exp())
            .collect();
        WeightedIndex::new(w).expect("positive topic weights")
    }

    fn sample_item(&self, rng: &mut ChaCha8Rng, topics: &WeightedIndex<f64>) -> usize {
        let t = topics.sample(rng);
        let items = &self.items_by_topic[t];
        if items.is_empty() {
            rng.random_range(0..self.item_content.len())
        } else {
            items[rng.random_range(0..items.len())]
        }
    }
}

/// Ground-truth state of one user, kept for label construction.
struct UserTruth {
    history: UserHistory,
    intent: Vec<f64>,
    /// Active hour of day in `[0, 24)`.
    peak_hour: f64,
    device: usize,
    interest_by_day: Vec<Vec<f64>>,
}

fn simulate_user(cfg: &GeneratorConfig, catalog: &Catalog, user: u64) -> UserTruth {
    let mut rng = rng::stream(cfg.seed, "user", user);
    let d = cfg.d_content;
    let peak_hour = rng.random_range(0.0..24.0);
    let device = rng.random_range(0..cfg.num_devices);
    let intent = {
        let t = rng.random_range(0..cfg.num_topics);
        let mut v: Vec<f64> = catalog.topic_centroids[t]
            .iter()
            .zip(unit_noise(&mut rng, d))
            .map(|(c, n)| c + 0.3 * n)
            .collect();
        normalize(&mut v);
        v
    };
    let intent_topics = catalog.topic_weights(&intent, cfg.topic_sharpness);
    let mut interest = unit_noise(&mut rng, d);
    let base = cfg.events_per_day / 24.0;
    let mut events = Vec::new();
    let mut interest_by_day = Vec::with_capacity(cfg.horizon_days as usize);
    for day in 0..cfg.horizon_days {
        if day > 0 {
            let step = unit_noise(&mut rng, d);
            interest
                .iter_mut()
                .zip(&step)
                .for_each(|(x, s)| *x += cfg.interest_drift * s);
            normalize(&mut interest);
        }
        interest_by_day.push(interest.clone());
        let interest_topics = catalog.topic_weights(&interest, cfg.topic_sharpness);
        for hour in 0..24u64 {
            let phase = 2.0 * PI * (hour as f64 + 0.5 - peak_hour) / 24.0;
            let rate = base * (1.0 + cfg.seasonality_amplitude * phase.cos());
            if rate <= 0.0 {
                continue;
            }
            let count = Poisson::new(rate).expect("positive rate").sample(&mut rng) as usize;
            let start = (day * 24 + hour) * SECONDS_PER_HOUR;
            let mut times: Vec<u64> = (0..count)
                .map(|_| start + rng.random_range(0..SECONDS_PER_HOUR))
                .collect();
            times.sort_unstable();
            for t in times {
                let from_intent = rng.random_bool(cfg.intent_share);
                let topics = if from_intent { &intent_topics } else { &interest_topics };
                let item = catalog.sample_item(&mut rng, topics);
                let content = &catalog.item_content[item];
                let action_type = if rng.random_bool(cfg.organic_fraction) {
                    ActionType::Organic
                } else {
                    let affinity = dot(content, &interest).max(dot(content, &intent));
                    let p_click = sigmoid(logit(cfg.click_rate) + 2.0 * affinity);
                    if rng.random_bool(p_click) {
                        let p_conv = cfg.conversion_fraction * sigmoid(6.0 * (dot(content, &intent) - 0.5));
                        if rng.random_bool(p_conv) {
                            ActionType::Conversion
                        } else {
                            ActionType::Click
                        }
                    } else {
                        ActionType::View
                    }
                };
                let content_vec = rng
                    .random_bool(cfg.content_coverage)
                    .then(|| Arc::clone(content));
                events.push(ActionEvent {
                    timestamp_s: t,
                    action_type,
                    item_id: item,
                    surface_id: rng.random_range(0..cfg.num_surfaces),
                    content_vec,
                    meta_id: catalog.item_topic[item],
                });
            }
        }
    }
    UserTruth {
        history: UserHistory {
            user_id: user,
            events,
            latent_interest: interest,
        },
        intent,
        peak_hour,
        device,
        interest_by_day,
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Per-user event streams only (no requests or labels).
pub fn generate_users(cfg: &GeneratorConfig) -> Result<Vec<UserHistory>> {
    cfg.validate()?;
    let catalog = build_catalog(cfg);
    Ok((0..cfg.num_users as u64)
        .into_par_iter()
        .map(|u| simulate_user(cfg, &catalog, u).history)
        .collect())
}

/// Label-relevant summary statistics of a history snapshot.
pub struct PlantedSignals {
    pub recent_match: f64,
    pub long_match: f64,
    pub phase_match: f64,
}

pub fn planted_signals(
    cfg: &GeneratorConfig,
    catalog: &Catalog,
    history: &[ActionEvent],
    candidate: &[f64],
    request_time: u64,
    peak_hour: f64,
) -> PlantedSignals {
    let d = cfg.d_content;
    let mut recent = vec![0.0; d];
    for e in history.iter().rev().take(cfg.recent_window) {
        recent
            .iter_mut()
            .zip(catalog.item_content[e.item_id].iter())
            .for_each(|(a, b)| *a += b);
    }
    let window_start = request_time.saturating_sub(cfg.long_range_days * SECONDS_PER_DAY);
    let mut long = vec![0.0; d];
    for e in history
        .iter()
        .rev()
        .take_while(|e| e.timestamp_s >= window_start)
        .filter(|e| e.action_type == ActionType::Conversion)
    {
        long.iter_mut()
            .zip(catalog.item_content[e.item_id].iter())
            .for_each(|(a, b)| *a += b);
    }
    let hour = (request_time % SECONDS_PER_DAY) as f64 / SECONDS_PER_HOUR as f64;
    PlantedSignals {
        recent_match: cosine(candidate, &recent),
        long_match: cosine(candidate, &long),
        phase_match: (2.0 * PI * (hour - peak_hour) / 24.0).cos(),
    }
}

struct PendingExample {
    example: LabeledExample,
    logit: f64,
    long_match: f64,
}

fn user_requests(cfg: &GeneratorConfig, catalog: &Catalog, truth: &UserTruth) -> Vec<PendingExample> {
    let user = truth.history.user_id;
    let mut rng = rng::stream(cfg.seed, "requests", user);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let lo = cfg.long_range_days * SECONDS_PER_DAY;
    let hi = cfg.horizon_days * SECONDS_PER_DAY;
    let intent_topics = catalog.topic_weights(&truth.intent, cfg.topic_sharpness);
    let mut out = Vec::with_capacity(cfg.requests_per_user);
    for _ in 0..cfg.requests_per_user {
        let request_time = rng.random_range(lo..hi);
        let events = &truth.history.events;
        let end = events.partition_point(|e| e.timestamp_s < request_time);
        let day = (request_time / SECONDS_PER_DAY) as usize;
        let ad_id = match rng.random_range(0..3) {
            0 => {
                let topics = catalog.topic_weights(&truth.interest_by_day[day], cfg.topic_sharpness);
                catalog.sample_item(&mut rng, &topics)
            }
            1 => catalog.sample_item(&mut rng, &intent_topics),
            _ => rng.random_range(0..cfg.num_items),
        };
        let candidate = Candidate {
            ad_id,
            advertiser_id: catalog.item_advertiser[ad_id],
            content_vec: catalog.item_content[ad_id].to_vec(),
        };
        let signals = planted_signals(
            cfg,
            catalog,
            &events[..end],
            &candidate.content_vec,
            request_time,
            truth.peak_hour,
        );
        let logit = cfg.w_recent * signals.recent_match
            + cfg.w_long * signals.long_match
            + cfg.w_phase * signals.phase_match
            + cfg.noise_scale * normal.sample(&mut rng);
        let snapshot = events[end.saturating_sub(cfg.max_history)..end].to_vec();
        let context = RequestContext {
            request_time_s: request_time,
            surface_id: rng.random_range(0..cfg.num_surfaces),
            device_id: truth.device,
        };
        let mut example = LabeledExample {
            user_id: user,
            request_time_s: request_time,
            events: snapshot,
            candidate,
            context,
            labels: Labels([0, 0]),
            cross_features: Vec::new(),
        };
        example.finalize();
        out.push(PendingExample {
            example,
            logit,
            long_match: signals.long_match,
        });
    }
    out
}

/// Bias `b` with `mean(sigmoid(logits + b)) = target`, by bisection on `[-10, 10]`.
pub fn search_bias(logits: &[f64], target: f64) -> Result<f64> {
    let rate = |b: f64| logits.iter().map(|l| sigmoid(l + b)).sum::<f64>() / logits.len().max(1) as f64;
    let (mut lo, mut hi) = (-10.0, 10.0);
    if logits.is_empty() || rate(lo) > target || rate(hi) < target {
        return Err(Error::UnreachableRate { target });
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Generates users, requests and labels, split by request time.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let catalog = build_catalog(cfg);
    let truths: Vec<UserTruth> = (0..cfg.num_users as u64)
        .into_par_iter()
        .map(|u| simulate_user(cfg, &catalog, u))
        .collect();
    let pending: Vec<Vec<PendingExample>> = truths
        .par_iter()
        .map(|t| user_requests(cfg, &catalog, t))
        .collect();
    let logits: Vec<f64> = pending.iter().flatten().map(|p| p.logit).collect();
    let bias = search_bias(&logits, cfg.target_positive_rate)?;
    let cvr_bias = logit(cfg.conversion_fraction);

    let mut examples: Vec<LabeledExample> = pending
        .into_par_iter()
        .enumerate()
        .flat_map_iter(|(u, user_pending)| {
            let mut rng = rng::stream(cfg.seed, "labels", u as u64);
            user_pending
                .into_iter()
                .map(|p| {
                    let ctr = rng.random_bool(sigmoid(p.logit + bias));
                    let cvr_draw = rng.random_bool(sigmoid(cvr_bias + cfg.w_long * p.long_match));
                    let mut ex = p.example;
                    ex.labels = Labels([u8::from(ctr), u8::from(ctr && cvr_draw)]);
                    ex
                })
                .collect::<Vec<_>>()
        })
        .collect();
    examples.sort_by_key(|e| (e.request_time_s, e.user_id));

    let n = examples.len();
    let mut cut = ((n as f64) * (1.0 - cfg.eval_fraction)).round() as usize;
    cut = cut.clamp(1.min(n), n);
    while cut > 0 && cut < n && examples[cut].request_time_s == examples[cut - 1].request_time_s {
        cut += 1;
    }
    let eval = examples.split_off(cut);
    Ok(Dataset {
        train: examples,
        eval,
        users: truths.into_iter().map(|t| t.history).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            num_users: 40,
            horizon_days: 6,
            long_range_days: 2,
            requests_per_user: 5,
            num_items: 200,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        let c = generate_dataset(&GeneratorConfig { seed: 9, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn histories_are_time_sorted_and_content_is_unit() {
        let ds = generate_dataset(&small()).unwrap();
        for u in &ds.users {
            assert!(u.events.windows(2).all(|w| w[0].timestamp_s <= w[1].timestamp_s));
            for e in &u.events {
                if let Some(c) = &e.content_vec {
                    assert!((dot(c, c).sqrt() - 1.0).abs() < 1e-8);
                }
            }
        }
        for ex in ds.train.iter().chain(&ds.eval) {
            assert!((dot(&ex.candidate.content_vec, &ex.candidate.content_vec).sqrt() - 1.0).abs() < 1e-8);
            assert!(ex.events.iter().all(|e| e.timestamp_s < ex.request_time_s));
        }
    }

    #[test]
    fn eval_is_strictly_later_and_cvr_implies_ctr() {
        let ds = generate_dataset(&small()).unwrap();
        let last_train = ds.train.iter().map(|e| e.request_time_s).max().unwrap();
        assert!(ds.eval.iter().all(|e| e.request_time_s > last_train));
        for ex in ds.train.iter().chain(&ds.eval) {
            assert!(ex.labels.0[1] <= ex.labels.0[0]);
        }
    }

    #[test]
    fn unreachable_rate_is_an_error() {
        assert!(matches!(search_bias(&[30.0, 40.0], 0.5), Err(Error::UnreachableRate { .. })));
        let b = search_bias(&[0.0, 1.0, -1.0], 0.3).unwrap();
        let rate = [0.0, 1.0, -1.0].iter().map(|l| sigmoid(l + b)).sum::<f64>() / 3.0;
        assert!((rate - 0.3).abs() < 1e-12);
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let cfg = GeneratorConfig {
            target_positive_rate: 1.0,
            ..small()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }
}
