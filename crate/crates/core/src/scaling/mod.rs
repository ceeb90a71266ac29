//! Sweeps over model size and sequence length, scaling-law fits, ablations
//! and matched-compute comparisons of upstream configurations.

mod ablation;
mod fit;
mod grid;
mod spec;
mod table;

pub use ablation::{
    check_iso_flops, composition_ablation, content_ablation, iso_flops_compare, iso_table, seq_length_sweep,
    CompositionAblation, CompositionRow, ContentAblation, ContentRow, CurvePoint, DepthCurve, IsoRow,
    SeqLengthSweep, ISO_FLOPS_TOLERANCE,
};
pub use fit::{fit_results, fit_scaling_law, width_threshold, FitReport, FitResult, WidthThreshold};
pub use grid::{
    config_flops, mean_stderr, pooled_stderr, run_configs, run_grid, train_and_evaluate, write_results_csv,
    write_runs_csv, RunResult, SeedRun,
};
pub use spec::{replicate_seed, Allocation, Axis, ExperimentSpec, FlopsColumn, RunConfig};
pub use table::Table;
