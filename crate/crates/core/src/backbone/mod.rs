//! Non-sequence interaction network, task heads, and the NE metric.

mod metrics;
mod network;

pub use metrics::{
    clamp_prob, delta_ne, evaluate_heads, metric_records, multi_task_loss, normalized_entropy, MetricRecord,
    PRED_EPS,
};
pub use network::{
    clamped_predictions, Backbone, BackboneConfig, DenseField, FeatureBundle, FeatureSchema, HeadWeights,
    InteractionLayer, SparseField,
};
