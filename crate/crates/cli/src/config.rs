//! Flat, typed run configuration.
//!
//! The file is TOML. Nested tables are flattened to dotted keys, so
//! `modes.M = 256` and `[modes]\nM = 256` are the same key.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use heatstab::schedule::first_index;
use heatstab::spectral::{ControlRegion, DomainKind, DomainSpec};
use heatstab::ScheduleKind;
use serde_json::{json, Value};

pub const KEYS: [&str; 17] = [
    "domain.kind",
    "domain.lengths",
    "omega.bounds",
    "modes.M",
    "experiment.kind",
    "lambda",
    "lambda_grid",
    "T",
    "T_grid",
    "Lambda",
    "eps_null",
    "eps_zero",
    "schedule.kind",
    "schedule.k",
    "seed",
    "c1_override",
    "c2_override",
];

pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [25.0, 100.0, 400.0, 900.0, 1600.0, 2500.0];
pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_T: f64 = 0.25;
pub const DEFAULT_FINITE_T: f64 = 0.5;
pub const DEFAULT_EPS_NULL: f64 = 1e-8;
pub const DEFAULT_EPS_ZERO: f64 = 1e-6;
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExperimentKind {
    Spectral,
    Rapid,
    Null,
    Finite,
    Sweep,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Spectral => "spectral",
            ExperimentKind::Rapid => "rapid",
            ExperimentKind::Null => "null",
            ExperimentKind::Finite => "finite",
            ExperimentKind::Sweep => "sweep",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "spectral" => ExperimentKind::Spectral,
            "rapid" => ExperimentKind::Rapid,
            "null" => ExperimentKind::Null,
            "finite" => ExperimentKind::Finite,
            "sweep" => ExperimentKind::Sweep,
            other => return Err(format!("unknown experiment kind `{other}`")),
        })
    }
}

fn parse_schedule_kind(s: &str) -> Option<ScheduleKind> {
    match s {
        "poly4" => Some(ScheduleKind::Poly4),
        "poly_k" => Some(ScheduleKind::PolyK),
        "dyadic" => Some(ScheduleKind::Dyadic),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub domain: DomainSpec,
    pub omega: ControlRegion,
    pub modes: usize,
    pub kind: ExperimentKind,
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub horizon: f64,
    pub horizon_grid: Vec<f64>,
    pub radius: f64,
    pub eps_null: f64,
    pub eps_zero: f64,
    pub schedule_kind: ScheduleKind,
    pub schedule_k: Option<u32>,
    pub seed: u64,
    pub c1_override: Option<f64>,
    pub c2_override: Option<f64>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) -> Result<(), ConfigError> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            other => {
                if out.insert(key.clone(), other.clone()).is_some() {
                    return Err(ConfigError::new(&key, "given twice"));
                }
            }
        }
    }
    Ok(())
}

struct Fields(BTreeMap<String, toml::Value>);

impl Fields {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.0.remove(key)
    }

    fn number(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.take(key).map(|v| as_number(key, &v)).transpose()
    }

    fn string(&mut self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(type_error(key, "a string", &v)),
        }
    }

    fn integer(&mut self, key: &str) -> Result<Option<i64>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) => Ok(Some(i)),
            Some(v) => Err(type_error(key, "an integer", &v)),
        }
    }

    fn numbers(&mut self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Array(items)) => items
                .iter()
                .map(|v| as_number(key, v))
                .collect::<Result<_, _>>()
                .map(Some),
            Some(v) => Err(type_error(key, "an array of numbers", &v)),
        }
    }
}

fn type_error(key: &str, expected: &str, got: &toml::Value) -> ConfigError {
    ConfigError::new(
        key,
        format!("type mismatch: expected {expected}, got {}", got.type_str()),
    )
}

fn as_number(key: &str, v: &toml::Value) -> Result<f64, ConfigError> {
    match v {
        toml::Value::Float(x) => Ok(*x),
        toml::Value::Integer(i) => Ok(*i as f64),
        other => Err(type_error(key, "a number", other)),
    }
}

fn required<T>(key: &str, v: Option<T>) -> Result<T, ConfigError> {
    v.ok_or_else(|| ConfigError::new(key, "missing required key"))
}

fn check(key: &str, ok: bool, message: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::new(key, message()))
    }
}

fn check_grid(key: &str, grid: &[f64], min_len: usize) -> Result<(), ConfigError> {
    check(key, grid.len() >= min_len, || {
        format!("needs at least {min_len} entries")
    })?;
    check(key, grid.iter().all(|x| x.is_finite() && *x > 0.0), || {
        "entries must be positive".into()
    })?;
    check(key, grid.windows(2).all(|w| w[0] != w[1]), || {
        "entries must be distinct".into()
    })
}

fn admissible(key: &str, kind: ScheduleKind, t: f64, k: Option<u32>) -> Result<(), ConfigError> {
    first_index(kind, t, k).map(|_| ()).map_err(|e| {
        let msg = match e {
            heatstab::Error::HorizonNotAdmissible(m) | heatstab::Error::InvalidInput(m) => m,
            other => other.to_string(),
        };
        ConfigError::new(key, msg)
    })
}

impl RunConfig {
    /// Parses and validates a config. `subcommand` fills `experiment.kind`
    /// when absent and must agree with it when present.
    pub fn parse(text: &str, subcommand: Option<ExperimentKind>) -> Result<Self, ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::new("<document>", e.message()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat)?;
        if let Some(unknown) = flat.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(ConfigError::new(unknown, "unknown key"));
        }
        let mut f = Fields(flat);

        let kind = match (f.string("experiment.kind")?, subcommand) {
            (Some(s), sub) => {
                let k: ExperimentKind = s.parse().map_err(|m: String| ConfigError::new("experiment.kind", m))?;
                if let Some(sub) = sub.filter(|sub| *sub != k) {
                    return Err(ConfigError::new(
                        "experiment.kind",
                        format!("`{k}` does not match the `{sub}` subcommand"),
                    ));
                }
                k
            }
            (None, Some(sub)) => sub,
            (None, None) => return Err(ConfigError::new("experiment.kind", "missing required key")),
        };

        let domain_kind = match required("domain.kind", f.string("domain.kind")?)?.as_str() {
            "interval" => DomainKind::Interval,
            "box" => DomainKind::Box,
            other => {
                return Err(ConfigError::new(
                    "domain.kind",
                    format!("expected `interval` or `box`, got `{other}`"),
                ))
            }
        };
        let lengths = required("domain.lengths", f.numbers("domain.lengths")?)?;
        let domain =
            DomainSpec::new(domain_kind, lengths).map_err(|e| ConfigError::new("domain.lengths", e.to_string()))?;

        let bounds = match required("omega.bounds", f.take("omega.bounds"))? {
            toml::Value::Array(axes) => axes
                .iter()
                .map(|axis| match axis {
                    toml::Value::Array(pair) if pair.len() == 2 => Ok((
                        as_number("omega.bounds", &pair[0])?,
                        as_number("omega.bounds", &pair[1])?,
                    )),
                    other => Err(type_error("omega.bounds", "a [lo, hi] pair per axis", other)),
                })
                .collect::<Result<Vec<_>, _>>()?,
            other => return Err(type_error("omega.bounds", "an array of [lo, hi] pairs", &other)),
        };
        let omega = ControlRegion::new(bounds, &domain).map_err(|e| ConfigError::new("omega.bounds", e.to_string()))?;

        let modes = required("modes.M", f.integer("modes.M")?)?;
        check("modes.M", modes >= 1, || format!("must be at least 1, got {modes}"))?;

        let lambda = f.number("lambda")?.unwrap_or(DEFAULT_LAMBDA);
        check("lambda", lambda.is_finite() && lambda > 0.0, || {
            format!("must be positive, got {lambda}")
        })?;
        let lambda_grid = f
            .numbers("lambda_grid")?
            .unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
        check_grid("lambda_grid", &lambda_grid, 2)?;
        check("lambda_grid", lambda_grid.windows(2).all(|w| w[0] < w[1]), || {
            "must be increasing".into()
        })?;

        let schedule_kind = match f.string("schedule.kind")? {
            None => ScheduleKind::Dyadic,
            Some(s) => parse_schedule_kind(&s).ok_or_else(|| {
                ConfigError::new("schedule.kind", format!("expected poly4, poly_k or dyadic, got `{s}`"))
            })?,
        };
        let schedule_k = match f.integer("schedule.k")? {
            None => None,
            Some(k) if (1..=u32::MAX as i64).contains(&k) => Some(k as u32),
            Some(k) => {
                return Err(ConfigError::new(
                    "schedule.k",
                    format!("must be a positive integer, got {k}"),
                ))
            }
        };
        if schedule_kind == ScheduleKind::PolyK && schedule_k.is_none() {
            return Err(ConfigError::new("schedule.k", "required when schedule.kind = poly_k"));
        }

        let default_t = if kind == ExperimentKind::Finite {
            DEFAULT_FINITE_T
        } else {
            DEFAULT_T
        };
        let horizon = f.number("T")?.unwrap_or(default_t);
        let horizon_grid = f.numbers("T_grid")?.unwrap_or_default();
        match kind {
            ExperimentKind::Null => admissible("T", schedule_kind, horizon, schedule_k)?,
            ExperimentKind::Finite => admissible("T", ScheduleKind::Poly4, horizon, None)?,
            ExperimentKind::Sweep => {
                check_grid("T_grid", &horizon_grid, 3)?;
                for &t in &horizon_grid {
                    admissible("T_grid", schedule_kind, t, schedule_k)?;
                }
            }
            _ => {}
        }

        let radius = f.number("Lambda")?.unwrap_or(1.0);
        check("Lambda", radius.is_finite() && radius >= 1.0, || {
            format!("must be at least 1, got {radius}")
        })?;
        let eps_null = f.number("eps_null")?.unwrap_or(DEFAULT_EPS_NULL);
        check("eps_null", eps_null > 0.0 && eps_null < 1.0, || {
            format!("must lie in (0, 1), got {eps_null}")
        })?;
        let eps_zero = f.number("eps_zero")?.unwrap_or(DEFAULT_EPS_ZERO);
        check("eps_zero", eps_zero > 0.0 && eps_zero < 1.0, || {
            format!("must lie in (0, 1), got {eps_zero}")
        })?;

        let seed = f.integer("seed")?.unwrap_or(DEFAULT_SEED as i64);
        check("seed", seed >= 0, || format!("must be nonnegative, got {seed}"))?;

        let c1_override = f.number("c1_override")?;
        if let Some(c1) = c1_override {
            check("c1_override", c1.is_finite() && c1 >= 1.0, || {
                format!("must be at least 1, got {c1}")
            })?;
        }
        let c2_override = f.number("c2_override")?;
        if let Some(c2) = c2_override {
            let floor = 2.0 * c1_override.unwrap_or(1.0);
            check("c2_override", c2.is_finite() && c2 >= floor, || {
                format!("must be at least 2·C1 = {floor}, got {c2}")
            })?;
        }
        debug_assert!(f.0.is_empty());

        Ok(Self {
            domain,
            omega,
            modes: modes as usize,
            kind,
            lambda,
            lambda_grid,
            horizon,
            horizon_grid,
            radius,
            eps_null,
            eps_zero,
            schedule_kind,
            schedule_k,
            seed: seed as u64,
            c1_override,
            c2_override,
        })
    }

    /// Every key with its effective value, defaults included.
    pub fn echo(&self) -> BTreeMap<&'static str, Value> {
        let kind = match self.domain.kind {
            DomainKind::Interval => "interval",
            DomainKind::Box => "box",
        };
        let bounds: Vec<[f64; 2]> = self.omega.bounds.iter().map(|&(a, b)| [a, b]).collect();
        BTreeMap::from([
            ("domain.kind", json!(kind)),
            ("domain.lengths", json!(self.domain.lengths)),
            ("omega.bounds", json!(bounds)),
            ("modes.M", json!(self.modes)),
            ("experiment.kind", json!(self.kind.as_str())),
            ("lambda", json!(self.lambda)),
            ("lambda_grid", json!(self.lambda_grid)),
            ("T", json!(self.horizon)),
            ("T_grid", json!(self.horizon_grid)),
            ("Lambda", json!(self.radius)),
            ("eps_null", json!(self.eps_null)),
            ("eps_zero", json!(self.eps_zero)),
            ("schedule.kind", json!(self.schedule_kind.as_str())),
            ("schedule.k", json!(self.schedule_k)),
            ("seed", json!(self.seed)),
            ("c1_override", json!(self.c1_override)),
            ("c2_override", json!(self.c2_override)),
        ])
    }
}
