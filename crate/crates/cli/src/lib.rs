//! Command-line front end: configuration, output files and the four run
//! operations (`predict`, `solve`, `continue`, `experiment`).

pub mod config;
pub mod output;
pub mod run;

pub use config::{ConfigError, RunConfig, RunKind, Settings};
pub use run::RunError;
