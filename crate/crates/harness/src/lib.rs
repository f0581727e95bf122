//! Configuration, orchestration and result files for feddom experiments.

pub mod cli;
pub mod commands;
pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod results;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
