//! Experiment tooling: configuration, training runs with metrics and
//! checkpoints, convergence sweeps, tournaments and plot data.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod plotdata;
pub mod presets;
pub mod runner;
pub mod sweep;
pub mod tournament;

pub use checkpoint::Checkpoint;
pub use config::{parse_config, ExperimentConfig, ExperimentKind};
pub use runner::{run_experiment, RunOptions, RunSummary};
