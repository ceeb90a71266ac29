use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Kind of a logged user action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    View,
    Click,
    Conversion,
    Organic,
}

impl ActionType {
    pub const ALL: [ActionType; 4] = [
        ActionType::View,
        ActionType::Click,
        ActionType::Conversion,
        ActionType::Organic,
    ];

    pub fn index(self) -> usize {
        match self {
            ActionType::View => 0,
            ActionType::Click => 1,
            ActionType::Conversion => 2,
            ActionType::Organic => 3,
        }
    }

    /// Views and clicks: the dense, lower-value half of a composed sequence.
    pub fn is_view_like(self) -> bool {
        matches!(self, ActionType::View | ActionType::Click)
    }
}

/// Shared, immutable content embedding.
pub type ContentVec = Arc<[f64]>;

/// Rounds to nine significant digits (the serialized precision).
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn ser_content<S: Serializer>(v: &Option<ContentVec>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(c) => s.collect_seq(c.iter().map(|x| round_sig9(*x))),
        None => s.serialize_none(),
    }
}

fn de_content<'de, D: Deserializer<'de>>(d: D) -> Result<Option<ContentVec>, D::Error> {
    let v: Option<Vec<f64>> = Option::deserialize(d)?;
    Ok(v.map(Arc::from))
}

fn ser_vec9<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| round_sig9(*x)))
}

/// One timestamped user action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionEvent {
    #[serde(rename = "t")]
    pub timestamp_s: u64,
    #[serde(rename = "type")]
    pub action_type: ActionType,
    #[serde(rename = "item")]
    pub item_id: usize,
    #[serde(rename = "surface")]
    pub surface_id: usize,
    #[serde(rename = "content", serialize_with = "ser_content", deserialize_with = "de_content")]
    pub content_vec: Option<ContentVec>,
    #[serde(rename = "meta")]
    pub meta_id: usize,
}

/// A user's full action stream, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub user_id: u64,
    pub events: Vec<ActionEvent>,
    /// Generator ground truth at the end of the horizon; never a model input.
    pub latent_interest: Vec<f64>,
}

impl UserHistory {
    /// Events with `timestamp_s <= t`.
    pub fn up_to(&self, t: u64) -> &[ActionEvent] {
        let end = self.events.partition_point(|e| e.timestamp_s <= t);
        &self.events[..end]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub ad_id: usize,
    pub advertiser_id: usize,
    #[serde(rename = "content", serialize_with = "ser_vec9")]
    pub content_vec: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestContext {
    pub request_time_s: u64,
    pub surface_id: usize,
    pub device_id: usize,
}

/// Prediction heads, in label-vector order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Ctr,
    Cvr,
}

impl Head {
    pub const ALL: [Head; 2] = [Head::Ctr, Head::Cvr];

    pub fn index(self) -> usize {
        match self {
            Head::Ctr => 0,
            Head::Cvr => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::Ctr => "ctr",
            Head::Cvr => "cvr",
        }
    }
}

/// Binary labels ordered as [`Head::ALL`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Labels(pub [u8; 2]);

impl Labels {
    pub fn get(&self, head: Head) -> f64 {
        f64::from(self.0[head.index()])
    }
}

/// One ranking request with its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub user_id: u64,
    pub request_time_s: u64,
    /// User history strictly before the request, oldest first.
    pub events: Vec<ActionEvent>,
    pub candidate: Candidate,
    pub context: RequestContext,
    pub labels: Labels,
    /// User-ad interaction features; derived from `events` and `candidate`.
    #[serde(skip)]
    pub cross_features: Vec<f64>,
}

/// Number of user-ad cross features.
pub const NUM_CROSS_FEATURES: usize = 2;

/// `[ln(1 + interactions with the ad), ln(1 + clicks/conversions on the ad)]`.
pub fn cross_features(events: &[ActionEvent], candidate: &Candidate) -> Vec<f64> {
    let mut seen = 0u32;
    let mut engaged = 0u32;
    for e in events.iter().filter(|e| e.item_id == candidate.ad_id) {
        seen += 1;
        if matches!(e.action_type, ActionType::Click | ActionType::Conversion) {
            engaged += 1;
        }
    }
    vec![f64::from(seen).ln_1p(), f64::from(engaged).ln_1p()]
}

impl LabeledExample {
    /// Recomputes derived fields after deserialization.
    pub fn finalize(&mut self) {
        self.cross_features = cross_features(&self.events, &self.candidate);
    }
}
