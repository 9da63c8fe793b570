//! Experiment orchestration: one function per experiment kind, each returning
//! a report, its artifacts and the manifest of constants it consumed.

use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use heatstab::feedback::{make_params, select_c2};
use heatstab::schedule::{
    build_schedule, cost_scaling, run_null_control, solve_gamma, solve_gamma_eps, solve_q, RESOLUTION_FRACTION,
    VERIFY_UP_TO,
};
use heatstab::sim::{decay_rate, lyapunov_worst_ratio, run_stationary, stationary_bound_violations};
use heatstab::spectral::{enumerate_modes, fit_spectral_constant, gram_matrix, C1_MARGIN};
use heatstab::stabilizer::{nt_log_lhs, Stabilizer};
use heatstab::{
    ControlRegion, CostReport, IntegratorConfig, ModeBasis, Schedule, ScheduleKind, StabilizerConfig, StopRule, System,
    Trajectory,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigError, ExperimentKind, RunConfig};
use crate::manifest::{Provenance, RunManifest};

/// Horizon of the rapid-stabilization run.
pub const RAPID_HORIZON: f64 = 2.0;
/// Window over which the rapid decay rate is regressed.
pub const DECAY_WINDOW: (f64, f64) = (0.5, 1.5);
pub const RAPID_SAMPLES: usize = 256;
/// Random unit starts per start time in the finite-time check.
pub const FINITE_PROBES: usize = 20;
pub const UNIFORM_DELTA: f64 = 1e-2;
pub const UNIFORM_STARTS: usize = 16;
/// Directions used to measure amplification before choosing η.
pub const ETA_CALIBRATION_DIRECTIONS: usize = 4;
pub const PERIODICITY_SAMPLES: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid run: {0}")]
    Invalid(heatstab::Error),
    #[error(transparent)]
    Numerical(heatstab::Error),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl From<heatstab::Error> for RunError {
    fn from(e: heatstab::Error) -> Self {
        if e.is_numerical() {
            RunError::Numerical(e)
        } else {
            RunError::Invalid(e)
        }
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Invalid(_) => 2,
            RunError::Numerical(_) => 3,
            RunError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub report: Value,
    pub artifacts: Vec<Artifact>,
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    // serde_json's map is ordered, so a round-trip through Value sorts keys
    let v = serde_json::to_value(value).expect("serializable");
    let mut s = serde_json::to_string_pretty(&v).expect("serializable");
    s.push('\n');
    s
}

fn csv(traj: &Trajectory) -> Artifact {
    let mut contents = Vec::new();
    traj.write_csv(&mut contents).expect("writing to memory");
    Artifact {
        name: "trajectory.csv".into(),
        contents,
    }
}

fn json_artifact(name: &str, value: &Value) -> Artifact {
    Artifact {
        name: name.into(),
        contents: to_json(value).into_bytes(),
    }
}

/// Unit-norm vector with coefficients uniform in `[-1, 1]`.
pub fn random_unit(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Context<'a> {
    config: &'a RunConfig,
    basis: ModeBasis,
    region: ControlRegion,
    manifest: RunManifest,
    integrator: IntegratorConfig,
    rng: ChaCha8Rng,
}

impl<'a> Context<'a> {
    fn new(config: &'a RunConfig) -> Result<Self, RunError> {
        let basis = enumerate_modes(&config.domain, config.modes)?;
        let mut manifest = RunManifest::new(config);
        let integrator = IntegratorConfig::default();
        manifest.record("integrator.tolerance", integrator.tolerance, Provenance::Fixed);
        manifest.record("integrator.min_step", integrator.min_step, Provenance::Fixed);
        manifest.record("tau_1", basis.modes[0].eigenvalue, Provenance::Derived);
        manifest.record("tau_M", basis.tau_max(), Provenance::Derived);
        Ok(Self {
            region: config.omega.clone(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            basis,
            manifest,
            integrator,
        })
    }

    fn c1(&mut self) -> Result<f64, RunError> {
        if let Some(c) = self.manifest.get("C1") {
            return Ok(c);
        }
        if let Some(c) = self.config.c1_override {
            return Ok(self.manifest.record("C1", c, Provenance::Supplied));
        }
        let fit = fit_spectral_constant(&self.basis, &self.region, &self.config.lambda_grid)?;
        self.manifest.record("C1_margin", C1_MARGIN, Provenance::Fixed);
        self.manifest.record("spectral_slope", fit.fitted_c, Provenance::Fitted);
        Ok(self.manifest.record("C1", fit.operational_c1(), Provenance::Fitted))
    }

    /// C₂ from the 2-adic grid over `[τ₁, 0.8 τ_M]`, unless supplied.
    fn c2(&mut self, c1: f64) -> Result<f64, RunError> {
        if let Some(c) = self.config.c2_override {
            if c < 2.0 * c1 {
                return Err(ConfigError {
                    key: "c2_override".into(),
                    message: format!("must be at least 2·C1 = {}, got {c}", 2.0 * c1),
                }
                .into());
            }
            return Ok(self.manifest.record("C2", c, Provenance::Supplied));
        }
        let lo = self.basis.modes[0].eigenvalue;
        let hi = RESOLUTION_FRACTION * self.basis.tau_max();
        self.manifest
            .record("resolution_fraction", RESOLUTION_FRACTION, Provenance::Fixed);
        Ok(self.manifest.record("C2", select_c2(c1, lo, hi)?, Provenance::Derived))
    }

    fn unit_start(&mut self) -> Vec<f64> {
        random_unit(&mut self.rng, self.basis.len())
    }
}

/// Runs the configured experiment without touching the filesystem.
pub fn run(config: &RunConfig) -> Result<Outcome, RunError> {
    let clock = Instant::now();
    let mut ctx = Context::new(config)?;
    let (report, artifacts) = match config.kind {
        ExperimentKind::Spectral => spectral(&mut ctx)?,
        ExperimentKind::Rapid => rapid(&mut ctx)?,
        ExperimentKind::Null => null(&mut ctx)?,
        ExperimentKind::Finite => finite(&mut ctx)?,
        ExperimentKind::Sweep => sweep(&mut ctx)?,
    };
    let mut manifest = ctx.manifest;
    manifest.wall_clock = clock.elapsed().as_secs_f64();
    Ok(Outcome {
        manifest,
        report,
        artifacts,
    })
}

/// Writes `manifest.json`, `report.json` and the artifacts into `dir`.
pub fn write_outputs(outcome: &Outcome, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), to_json(&outcome.manifest))?;
    fs::write(dir.join("report.json"), to_json(&outcome.report))?;
    for a in &outcome.artifacts {
        fs::write(dir.join(&a.name), &a.contents)?;
    }
    Ok(())
}

type Produced = (Value, Vec<Artifact>);

fn spectral(ctx: &mut Context) -> Result<Produced, RunError> {
    let fit = fit_spectral_constant(&ctx.basis, &ctx.region, &ctx.config.lambda_grid)?;
    ctx.manifest.record("C1_margin", C1_MARGIN, Provenance::Fixed);
    ctx.manifest.record("spectral_slope", fit.fitted_c, Provenance::Fitted);
    let c1 = ctx.manifest.record("C1", fit.operational_c1(), Provenance::Fitted);
    let weyl: Vec<Value> = ctx
        .config
        .lambda_grid
        .iter()
        .map(|&l| Ok(json!({"lambda": l, "ratio": ctx.basis.weyl_check(l)?})))
        .collect::<Result<_, heatstab::Error>>()?;
    let mut report = serde_json::to_value(&fit).expect("serializable");
    let obj = report.as_object_mut().expect("struct");
    obj.insert("operational_c1".into(), json!(c1));
    obj.insert("all_positive".into(), json!(fit.min_eigs.iter().all(|&m| m > 0.0)));
    obj.insert("weyl".into(), Value::Array(weyl));
    Ok((report, Vec::new()))
}

fn rapid(ctx: &mut Context) -> Result<Produced, RunError> {
    let lambda = ctx.config.lambda;
    let c1 = ctx.c1()?;
    let c2 = ctx.c2(c1)?;
    let params = make_params(lambda, c1, c2, &ctx.basis)?;
    let m = &mut ctx.manifest;
    m.record("N", params.n as f64, Provenance::Derived);
    m.record("gamma", params.gamma, Provenance::Derived);
    m.record("ln_mu", params.ln_mu, Provenance::Derived);
    m.record("ln_inv_r", params.ln_inv_r, Provenance::Derived);
    m.record("horizon", RAPID_HORIZON, Provenance::Fixed);
    m.record("samples", RAPID_SAMPLES as f64, Provenance::Fixed);
    m.record("decay_window.lo", DECAY_WINDOW.0, Provenance::Fixed);
    m.record("decay_window.hi", DECAY_WINDOW.1, Provenance::Fixed);

    let system = System::new(&ctx.basis, gram_matrix(&ctx.basis, &ctx.region, params.n.max(1))?)?;
    let y0 = ctx.unit_start();
    let cfg = IntegratorConfig {
        samples_per_interval: RAPID_SAMPLES,
        ..ctx.integrator
    };
    let traj = run_stationary(&system, &params, &y0, RAPID_HORIZON, &cfg)?;
    let rate = decay_rate(&traj, DECAY_WINDOW.0, DECAY_WINDOW.1)?;
    let report = json!({
        "lambda": lambda,
        "N": params.n,
        "gamma": params.gamma,
        "C1": c1,
        "C2": c2,
        "horizon": RAPID_HORIZON,
        "decay_rate": rate,
        "decay_target": lambda / 2.0,
        "lyapunov_v_worst_ratio": lyapunov_worst_ratio(&traj.samples, lambda, |s| s.v),
        "lyapunov_v1_worst_ratio": lyapunov_worst_ratio(&traj.samples, lambda, |s| s.v1),
        "bound_violations": stationary_bound_violations(&traj, &params),
        "sup_control": traj.sup_control(),
        "final_norm": traj.final_state().map_or(0.0, |s| s.norm()),
    });
    Ok((report, vec![csv(&traj)]))
}

/// Γ, Γ_ε or Q for the configured schedule kind.
fn schedule_constant(ctx: &mut Context, kind: ScheduleKind, c1: f64, c2: f64) -> Result<f64, RunError> {
    let (name, sol) = match kind {
        ScheduleKind::Poly4 => ("Gamma", solve_gamma(c1, c2)?),
        ScheduleKind::PolyK => {
            let k = ctx.config.schedule_k.expect("validated");
            ("Gamma_eps", solve_gamma_eps(c1, c2, k)?)
        }
        ScheduleKind::Dyadic => ("Q", solve_q(c1, c2)?),
    };
    ctx.manifest
        .record("verify_up_to", VERIFY_UP_TO as f64, Provenance::Fixed);
    Ok(ctx.manifest.record(name, sol.value, Provenance::Derived))
}

fn null_schedule(ctx: &mut Context, horizon: f64) -> Result<(Schedule, f64, f64), RunError> {
    let c1 = ctx.c1()?;
    let c2 = ctx.c2(c1)?;
    let kind = ctx.config.schedule_kind;
    let constant = schedule_constant(ctx, kind, c1, c2)?;
    ctx.manifest
        .record("resolution_fraction", RESOLUTION_FRACTION, Provenance::Fixed);
    let schedule = build_schedule(
        kind,
        horizon,
        constant,
        ctx.config.schedule_k,
        StopRule::TargetRatio(ctx.config.eps_null),
        c1,
        ctx.basis.tau_max(),
    )?;
    Ok((schedule, c1, c2))
}

fn cost_report_json(r: &CostReport) -> Value {
    json!({
        "kind": r.kind.as_str(),
        "T": r.horizon,
        "gamma_or_q": r.gamma_or_q,
        "c3": r.c3,
        "sup_cost": r.sup_cost,
        "terminal_ratio": r.terminal_ratio,
        "n_max": r.n_max,
        "stop_rule": r.stop_rule.as_str(),
    })
}

fn null(ctx: &mut Context) -> Result<Produced, RunError> {
    let (schedule, c1, c2) = null_schedule(ctx, ctx.config.horizon)?;
    let y0 = ctx.unit_start();
    let (traj, report) = run_null_control(&schedule, &y0, &ctx.basis, &ctx.region, c1, c2, &ctx.integrator)?;
    let pieces: Vec<Value> = schedule
        .pieces
        .iter()
        .enumerate()
        .map(|(i, p)| {
            json!({
                "n": p.n,
                "t_start": p.t_start,
                "t_end": p.t_end,
                "lambda": p.lambda,
                "sup_cost": report.per_piece_sup[i],
                "boundary_ratio": report.boundary_ratios[i],
                "boundary_log_bound": report.boundary_log_bounds[i],
            })
        })
        .collect();
    let details = json!({
        "pieces": pieces,
        "argmax_piece": report.argmax_piece(),
        "boundary_violations": report.boundary_violations,
        "cost_within_bound": report.cost_within_bound,
        "predicted_log_bound": schedule.predicted_log_bound,
        "constant_log_bound": schedule.constant_log_bound,
        "eps_null": ctx.config.eps_null,
    });
    Ok((
        cost_report_json(&report),
        vec![csv(&traj), json_artifact("pieces.json", &details)],
    ))
}

fn sweep(ctx: &mut Context) -> Result<Produced, RunError> {
    let grid = ctx.config.horizon_grid.clone();
    let mut runs = Vec::new();
    let mut costs = Vec::new();
    let mut c3 = 0.0;
    for &t in &grid {
        let (schedule, c1, c2) = null_schedule(ctx, t)?;
        let y0 = ctx.unit_start();
        let (_, report) = run_null_control(&schedule, &y0, &ctx.basis, &ctx.region, c1, c2, &ctx.integrator)?;
        c3 = report.c3;
        costs.push(report.sup_cost);
        let mut entry = cost_report_json(&report);
        entry["argmax_piece"] = json!(report.argmax_piece());
        runs.push(entry);
    }
    let kind = ctx.config.schedule_kind;
    let fit = cost_scaling(kind, &grid, &costs, ctx.config.schedule_k)?;
    let report = json!({
        "kind": kind.as_str(),
        "T_grid": grid,
        "runs": runs,
        "slope": fit.slope,
        "intercept": fit.intercept,
        "r_squared": fit.r_squared,
        "slope_bound": c3,
        "slope_within_bound": fit.slope <= c3,
    });
    Ok((report, Vec::new()))
}

fn finite(ctx: &mut Context) -> Result<Produced, RunError> {
    let c1 = ctx.c1()?;
    let c2 = ctx.c2(c1)?;
    let period = ctx.config.horizon;
    let config = StabilizerConfig::new(period, ctx.config.radius, c1, c2, ctx.basis.tau_max())?;
    let m = &mut ctx.manifest;
    m.record("Gamma", config.gamma, Provenance::Derived);
    m.record("n_T", config.n_t as f64, Provenance::Derived);
    m.record("N_T", config.n_big as f64, Provenance::Derived);
    m.record("resolution_fraction", RESOLUTION_FRACTION, Provenance::Fixed);
    m.record("uniform.delta", UNIFORM_DELTA, Provenance::Fixed);
    m.record("uniform.starts", UNIFORM_STARTS as f64, Provenance::Fixed);
    m.record("finite.probes", FINITE_PROBES as f64, Provenance::Fixed);
    let n_t_minimal =
        (config.n_t + 1..config.n_big).all(|n| nt_log_lhs(config.radius, config.gamma, config.n_t, n) > 0.0);
    let st = Stabilizer::new(config.clone(), &ctx.basis, &ctx.region, ctx.integrator)?;

    let mut eps_zero_achieved: f64 = 0.0;
    let mut amplification: f64 = 0.0;
    let mut inactive = true;
    let mut branch_violations = 0;
    let mut first_traj = None;
    for s in [0.0, period / 3.0, period / 2.0] {
        for _ in 0..FINITE_PROBES {
            let y0: Vec<f64> = ctx.unit_start().into_iter().map(|v| v * ctx.config.radius).collect();
            let y0_norm = y0.iter().map(|v| v * v).sum::<f64>().sqrt();
            let res = st.flow(s, s + 2.0 * period, &y0)?;
            eps_zero_achieved = eps_zero_achieved.max(res.terminal_norm() / y0_norm);
            let first_period = res
                .trajectory
                .samples
                .iter()
                .filter(|x| x.t <= s + period)
                .map(|x| x.norm_y)
                .fold(0.0, f64::max);
            amplification = amplification.max(first_period / y0_norm);
            if s == 0.0 {
                inactive &= res.cutoff_checks.iter().filter(|c| c.t >= period).all(|c| c.identity);
            }
            branch_violations += res.branch_bound_violations;
            first_traj.get_or_insert(res.trajectory);
        }
    }

    let y = ctx.unit_start();
    let direct = st.flow(0.0, period, &y)?;
    let split = st.flow(0.0, period / 3.0, &y)?;
    let composed = st.flow(period / 3.0, period, &split.terminal)?;
    let composition_error = direct
        .terminal
        .iter()
        .zip(&composed.terminal)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let periodic = (0..PERIODICITY_SAMPLES).all(|i| {
        let t = i as f64 * period / PERIODICITY_SAMPLES as f64;
        let u = st.periodic_feedback(t, &y);
        u == st.periodic_feedback(t + period, &y) && u == st.periodic_feedback(t + 3.0 * period, &y)
    });

    let starts: Vec<f64> = (0..UNIFORM_STARTS)
        .map(|i| i as f64 * period / UNIFORM_STARTS as f64)
        .collect();
    let mut calibration_rng = ChaCha8Rng::seed_from_u64(ctx.config.seed.wrapping_add(1));
    let calibration: Vec<Vec<f64>> = (0..ETA_CALIBRATION_DIRECTIONS)
        .map(|_| random_unit(&mut calibration_rng, ctx.basis.len()))
        .collect();
    let eta = st.compute_eta(UNIFORM_DELTA, &starts, &calibration)?;
    ctx.manifest.record("uniform.eta", eta.eta, Provenance::Derived);
    let directions: Vec<Vec<f64>> = (0..FINITE_PROBES).map(|_| ctx.unit_start()).collect();
    let uniform = st.uniform_stability_probe(UNIFORM_DELTA, eta.eta, &starts, &directions)?;

    let report = json!({
        "T": period,
        "n_T": config.n_t,
        "N_T": config.n_big,
        "Lambda": config.radius,
        "Gamma": config.gamma,
        "eps_zero_achieved": eps_zero_achieved,
        "worst_period_amplification": amplification,
        "uniform_stability": {
            "delta": uniform.delta,
            "eta": uniform.eta,
            "worst_ratio": uniform.worst_ratio,
        },
    });
    let checks = json!({
        "eps_zero": ctx.config.eps_zero,
        "eps_zero_pass": eps_zero_achieved <= ctx.config.eps_zero,
        "n_T_minimal": n_t_minimal,
        "truncated_inactive_second_period": inactive,
        "branch_bound_violations": branch_violations,
        "composition_error": composition_error,
        "periodicity_exact": periodic,
        "eta_within_period": eta.within_period,
        "eta_after_boundary": eta.after_boundary,
        "uniform_worst_sup": uniform.worst_sup,
        "uniform_probes": uniform.probes,
        "uniform_pass": uniform.pass,
    });
    let mut artifacts = vec![json_artifact("finite_checks.json", &checks)];
    if let Some(t) = first_traj {
        artifacts.push(csv(&t));
    }
    Ok((report, artifacts))
}
