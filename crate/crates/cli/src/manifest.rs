//! Run manifest: the config echo plus every constant the run consumed.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Measured from the run's own geometry.
    Fitted,
    /// Given in the config.
    Supplied,
    /// Computed from other constants.
    Derived,
    /// Built into the tool.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Constant {
    pub value: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config: BTreeMap<&'static str, Value>,
    pub constants: BTreeMap<String, Constant>,
    pub version: &'static str,
    /// Seconds spent in the run; the only nondeterministic field.
    pub wall_clock: f64,
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            config: config.echo(),
            constants: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION"),
            wall_clock: 0.0,
        }
    }

    /// Registers a constant the run read. Re-registering keeps the first value.
    pub fn record(&mut self, name: &str, value: f64, provenance: Provenance) -> f64 {
        self.constants
            .entry(name.to_string())
            .or_insert(Constant { value, provenance })
            .value
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.constants.get(name).map(|c| c.value)
    }
}
