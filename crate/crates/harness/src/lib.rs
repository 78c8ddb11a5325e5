//! Configuration, fixtures, caching and the scripted experiments behind the
//! `pti` command.

pub mod bundle;
pub mod cache;
pub mod config;
pub mod error;
pub mod experiments;
pub mod fixtures;
pub mod grid;
pub mod invariants;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use experiments::{run_experiment, ExperimentId, Summary};
