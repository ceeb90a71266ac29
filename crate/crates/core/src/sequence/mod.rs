//! Target-aware sequence transformer with latent attention.

mod config;
mod flops;
mod layer;
mod mla;
mod model;
mod probe;
mod tokenize;
mod weights;

pub use config::{QueryMode, SeqConfig};
pub use flops::{flop_count, layer_flops, FlopReport};
pub use layer::{ffn, pyramidal_trim, readout_lora, transformer_layer};
pub use mla::{absorb_weights, mla_absorbed, mla_naive, mla_naive_forward, FusedMla};
pub use model::{SeqModule, SeqOutput};
pub use probe::{attention_report, write_hourly_csv, write_mass_csv, AttentionReport, AttnProbe, LayerProbe};
pub use tokenize::{
    daily_pair, fuse_query_tokens, query_tokens, time_encode, time_features, time_periods_hours, tokenize,
    user_features, QueryInput, TIME_PAIRS,
};
pub use weights::{
    query_input_dim, token_input_dim, LayerWeights, LoraLinear, LoraMlp, MlaValues, MlaWeights, QueryWeights,
    SeqWeights, TokenizerWeights, HOURS_PER_DAY, USER_FEATURES,
};

#[cfg(test)]
mod tests;
