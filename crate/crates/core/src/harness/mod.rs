//! Experiment orchestration: configuration, source pre-training, adaptation,
//! ablation/measure/sweep grids, evaluation and attention-overlay export.

mod commands;
mod config;
mod eval;
mod overlay;

pub use commands::{
    ablation_variants, adapt, cmd_ablate, cmd_adapt, cmd_compare_measures, cmd_sweep, cmd_train_source,
    dedup_values, is_collapsed, load_source, measure_variants, prepare_data, run_grid, sweep_variants,
    tail_mean_at, train_source, write_run_files, AdaptOutcome, AdaptReport, GridResult, GridRow, GridRun,
    PreparedData, SourceOutcome, SourceReport, SweepParam,
};
pub use config::{DatasetSpec, ExperimentConfig, SourceTraining, OUTPUT_ROOT_ENV};
pub use eval::evaluate_accuracy;
pub use overlay::{bilinear_upsample, export_attention_overlay, min_max_normalize, OverlaySidecar};
