//! Experiment harness for the `sehilo` codec: closed-form tables, Monte Carlo
//! validation, pipeline sweeps, frame fuzzing and single pipeline runs.

pub mod commands;
pub mod config;
pub mod output;
pub mod workload;

pub use config::RunConfig;
