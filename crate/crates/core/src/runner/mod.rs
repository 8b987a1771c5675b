//! Experiment orchestration: configuration files, checkpoints and result files.

pub mod checkpoint;
mod config;
mod experiment;

pub use config::{BenchmarkSpec, ExperimentConfig, Overrides, ProbeSection};
pub use experiment::{aggregate, run_dir, run_experiment, run_seed, variant_dir, RunSummary, TaskSummary};
