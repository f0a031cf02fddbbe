//! Run orchestration: configuration files, checkpoints, the seed pipeline,
//! baselines and the ablation table.

mod checkpoint;
mod config;
mod pipeline;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_into, read_manifest,
    save_checkpoint, Checkpoint, Manifest, TensorEntry,
};
pub use config::{
    config_diff, default_synthetic, Ablation, Baseline, DataSource, EffectiveConfig, RunConfig,
};
pub use pipeline::{
    ablation_matrix, ablation_rows, aggregate, export_features, matrix_variant, prepare_data,
    read_features, run_baseline_decoupling, run_pipeline, run_pipeline_with, run_seed,
    thread_budget, AblationRow, AblationTable, PipelineReport, SeedData, SeedOutcome, Stage1Cache,
    Stat, AGGREGATE_KEYS, MATRIX_ROWS,
};
