//! User event sequences, the synthetic traffic generator and sequence composition.

mod compose;
mod generator;
mod io;
mod types;

pub use compose::{compose_sequence, truncate_to_horizon};
pub use generator::{
    build_catalog, cosine, generate_dataset, generate_users, planted_signals, search_bias, Catalog, Dataset,
    GeneratorConfig, PlantedSignals, Vocab, SECONDS_PER_DAY, SECONDS_PER_HOUR,
};
pub use io::{read_jsonl, to_jsonl_string, write_jsonl};
pub use types::*;

#[cfg(test)]
mod tests;
