//! File formats, configuration, parallel execution and the command-line
//! front end for the `dualap-core` virtual trial.

pub mod config;
pub mod io;
pub mod pipeline;

pub use config::{FixedParameters, RunConfig, CONFIG_ENV};
