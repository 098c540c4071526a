//! Config-driven experiment runner for the bilevel solvers.

// `!(v > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod config;
pub mod experiment;
pub mod grid;

pub use config::{parse_config, ConfigError, ExperimentConfig};
pub use experiment::CliError;
