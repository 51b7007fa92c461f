//! Experiment configuration, orchestration and metrics persistence.
//!
//! Every subcommand works inside one artifact directory holding
//! `config.json`, `config.sha256`, `checkpoints/`, the metrics tables and
//! `run.log`. Rerunning a subcommand resumes: finished checkpoints and rows
//! are reused, training continues from the latest epoch checkpoint.

mod config;
mod metrics;
mod runner;

pub use config::{
    BvConfig, BvReference, DatasetKind, EvalConfig, ExperimentConfig, InferenceNoise, MiConfig, QuantConfig, ETA_GRID,
    SCHEMA_VERSION,
};
pub use metrics::{csv_path, read_table, read_table_or_empty, write_table, BvRow, LongRow, MetricsRow, MiRow, Table};
pub use runner::{
    data_root, load_dataset, report, run, BvSummary, Command, ReportSummary, Run, RunSummary, PRETRAINED, STUDENT,
    TEACHER,
};
