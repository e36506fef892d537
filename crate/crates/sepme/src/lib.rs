//! File formats, configuration and the experiment runner for `sepme-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod meta;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, Method, Overrides};
pub use error::{CliError, CliResult};
