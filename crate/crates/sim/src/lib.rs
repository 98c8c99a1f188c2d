//! Simulation layer for `drekf-core`: TOML scenarios with dotted-key
//! overrides, a parallel Monte Carlo engine, metrics, persistence and the
//! `drekf` command line.

pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod persist;
pub mod sdp_dump;

pub use config::{EstimatorKind, Scenario};
pub use engine::{run_ct_benchmark, run_safe_nav_benchmark, run_scenario, run_sweep, Experiment, RunOptions};
pub use error::{SimError, SimResult};
pub use metrics::MetricsSummary;
