//! Two-stage serving simulation: event-triggered upstream inference into an
//! embedding store and downstream ranking on cached, possibly stale vectors.

mod pipeline;
mod store;
mod stream;

pub use pipeline::{
    cached_embeddings, display_percent, downstream_score, evaluate_pipeline, evaluate_variant,
    evaluate_without_upstream, synchronous_embedding, transfer_ratio, PipelineConfig, PipelineOutcome,
    PipelineReport, VariantOutcome,
};
pub use store::{EmbeddingRecord, EmbeddingStore};
pub use stream::{
    merge_timeline, process_event_stream, upstream_infer, write_update_log, Embedder, TimelineEntry,
    TriggerPolicy, UpdateLogEntry, UpstreamEncoder,
};
