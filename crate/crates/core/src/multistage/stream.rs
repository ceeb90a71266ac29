use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::store::{EmbeddingRecord, EmbeddingStore};
use crate::error::{Error, Result};
use crate::events::{ActionEvent, ActionType, UserHistory};
use crate::model::{RankingModel, Transfer};
use crate::numerics::ParamStore;

/// Which events refresh a user's embedding, and how often at most.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerPolicy {
    pub types: Vec<ActionType>,
    pub min_interval_s: u64,
}

impl Default for TriggerPolicy {
    fn default() -> Self {
        Self {
            types: vec![ActionType::Conversion],
            min_interval_s: 0,
        }
    }
}

impl TriggerPolicy {
    pub fn every_event() -> Self {
        Self {
            types: ActionType::ALL.to_vec(),
            min_interval_s: 0,
        }
    }

    pub fn matches(&self, t: ActionType) -> bool {
        self.types.contains(&t)
    }
}

/// One event of the all-user timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct TimelineEntry {
    pub user_id: u64,
    pub event: ActionEvent,
}

/// All users' events ordered by `(time, user)`, keeping per-user order.
pub fn merge_timeline(users: &[UserHistory], until: u64) -> Vec<TimelineEntry> {
    let mut out: Vec<TimelineEntry> = users
        .iter()
        .flat_map(|u| {
            u.up_to(until).iter().map(move |e| TimelineEntry {
                user_id: u.user_id,
                event: e.clone(),
            })
        })
        .collect();
    out.sort_by_key(|e| (e.event.timestamp_s, e.user_id));
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateLogEntry {
    pub user_id: u64,
    pub trigger_time: u64,
    pub event_type: ActionType,
    pub computed_at: u64,
}

pub fn write_update_log<W: Write>(mut w: W, log: &[UpdateLogEntry]) -> Result<()> {
    writeln!(w, "user_id,trigger_time,event_type")?;
    for e in log {
        let name = serde_json::to_value(e.event_type)?;
        writeln!(w, "{},{},{}", e.user_id, e.trigger_time, name.as_str().unwrap_or_default())?;
    }
    Ok(())
}

/// Produces the vector for `user` from its history up to `t`.
pub trait Embedder {
    fn version(&self) -> &str;
    fn embed(&self, user: u64, history: &[ActionEvent], t: u64) -> Result<Vec<f64>>;
}

/// A trained upstream model used as an [`Embedder`].
pub struct UpstreamEncoder<'a> {
    pub model: &'a RankingModel,
    pub params: &'a ParamStore,
    pub version: String,
}

impl<'a> UpstreamEncoder<'a> {
    pub fn new(model: &'a RankingModel, params: &'a ParamStore, version: impl Into<String>) -> Result<Self> {
        if !matches!(model.cfg.transfer, Transfer::Upstream { .. }) {
            return Err(Error::Config("the embedding encoder must be an upstream model".into()));
        }
        Ok(Self {
            model,
            params,
            version: version.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.model.transfer_dim().unwrap_or(0)
    }
}

impl Embedder for UpstreamEncoder<'_> {
    fn version(&self) -> &str {
        &self.version
    }

    fn embed(&self, _user: u64, history: &[ActionEvent], t: u64) -> Result<Vec<f64>> {
        self.model.user_embedding(self.params, history, t)
    }
}

/// Record for `user` computed from `history` (events up to `t`) at time `t`.
pub fn upstream_infer<E: Embedder + ?Sized>(
    embedder: &E,
    user: u64,
    history: &[ActionEvent],
    t: u64,
) -> Result<EmbeddingRecord> {
    Ok(EmbeddingRecord {
        user_id: user,
        vector: embedder.embed(user, history, t)?,
        computed_at: t,
        model_version: embedder.version().to_string(),
    })
}

/// Replays a time-sorted timeline, refreshing a user's embedding on every
/// matching event that is at least `min_interval_s` after that user's previous
/// refresh. The history seen at time `t` holds all of the user's events with
/// timestamp `<= t`; records become visible `delay_s` after their trigger.
pub fn process_event_stream<E: Embedder + ?Sized>(
    timeline: &[TimelineEntry],
    policy: &TriggerPolicy,
    embedder: &E,
    store: &EmbeddingStore,
    delay_s: u64,
) -> Result<Vec<UpdateLogEntry>> {
    if let Some(i) = timeline
        .windows(2)
        .position(|w| w[1].event.timestamp_s < w[0].event.timestamp_s)
    {
        return Err(Error::UnsortedTimeline { index: i + 1 });
    }
    let mut histories: HashMap<u64, Vec<ActionEvent>> = HashMap::new();
    let mut last_update: HashMap<u64, u64> = HashMap::new();
    let mut log = Vec::new();
    let mut start = 0;
    while start < timeline.len() {
        let t = timeline[start].event.timestamp_s;
        let end = start + timeline[start..].partition_point(|e| e.event.timestamp_s == t);
        let group = &timeline[start..end];
        for e in group {
            histories.entry(e.user_id).or_default().push(e.event.clone());
        }
        for e in group {
            if !policy.matches(e.event.action_type) {
                continue;
            }
            if let Some(&prev) = last_update.get(&e.user_id) {
                if t - prev < policy.min_interval_s {
                    continue;
                }
            }
            let mut record = upstream_infer(embedder, e.user_id, &histories[&e.user_id], t)?;
            record.computed_at = t.saturating_add(delay_s);
            log.push(UpdateLogEntry {
                user_id: e.user_id,
                trigger_time: t,
                event_type: e.event.action_type,
                computed_at: record.computed_at,
            });
            store.put(record)?;
            last_update.insert(e.user_id, t);
        }
        start = end;
    }
    Ok(log)
}
