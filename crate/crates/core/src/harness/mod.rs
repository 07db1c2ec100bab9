//! Experiment orchestration: seeding, data ingestion, synthetic data,
//! configuration, and the on-disk run layout.

pub mod config;
pub mod data;
pub mod run;
pub mod seed;
pub mod synthetic;

pub use config::{DataSource, ExperimentConfig, ExperimentKind};
pub use run::{run_experiment, Manifest, RunOutput};
