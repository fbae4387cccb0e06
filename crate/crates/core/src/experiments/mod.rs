//! Experiment protocol: configurations, per-seed runs, ablations, sweeps
//! and reports.

mod config;
pub mod metrics;
pub mod report;
mod runner;

pub use config::{DataSource, ExperimentConfig, Method, MethodSpec};
pub use runner::{run_method, run_name, AccuracySummary, Experiment, RunResult, SeedRun};
