//! Experiment harness: configuration, the end-to-end pipeline, sweeps, and
//! report persistence for the privacy-audit simulator.

pub mod config;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod reportio;

pub use config::{AccessMode, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, run_on_federation, ExperimentReport};
pub use grid::{pearson, run_grid, GridRow, GridSpec};
