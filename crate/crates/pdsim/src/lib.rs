//! File formats, configuration and experiment drivers around `pdsim-core`.
//!
//! The `pdsim` binary is a thin clap front end over [`experiment`].

pub mod config;
pub mod experiment;
pub mod report;
pub mod trace;

pub use config::ExperimentConfig;
