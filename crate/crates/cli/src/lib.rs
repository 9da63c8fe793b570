//! Configuration, orchestration and report emission for the `heatstab` binary.

pub mod config;
pub mod experiment;
pub mod manifest;

pub use config::{ConfigError, ExperimentKind, RunConfig};
pub use experiment::{run, to_json, write_outputs, Outcome, RunError};
pub use manifest::{Provenance, RunManifest};
