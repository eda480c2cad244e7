//! Config-driven runner for gPC-DDP experiments.
//!
//! A run reads a TOML experiment file, optimizes, optionally checks the
//! result against Monte-Carlo sampling and a mean-parameter baseline, and
//! writes CSV/JSON artifacts. See `configs/` for the bundled setups.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod experiment;
pub mod report;

pub use config::{load, parse, ExperimentConfig};
pub use error::{CliError, CliResult};
