//! The schedules and the stabilizer on a well-conditioned geometry,
//! ω = (0.02, π − 0.02), where the operational constants stay small enough
//! for every scheduled rate to be resolved in f64.

use heatstab_cli::{run, ExperimentKind, RunConfig};
use serde_json::Value;

fn wide(m: usize, extra: &str, kind: ExperimentKind) -> RunConfig {
    let text = format!(
        "domain.kind = \"interval\"\ndomain.lengths = [3.141592653589793]\n\
         omega.bounds = [[0.02, 3.121592653589793]]\nmodes.M = {m}\nseed = 5\n{extra}"
    );
    RunConfig::parse(&text, Some(kind)).unwrap()
}

fn artifact(outcome: &heatstab_cli::Outcome, name: &str) -> Value {
    let a = outcome.artifacts.iter().find(|a| a.name == name).unwrap();
    serde_json::from_slice(&a.contents).unwrap()
}

#[test]
fn fitted_constant_is_at_the_floor() {
    let out = run(&wide(256, "", ExperimentKind::Spectral)).unwrap();
    assert_eq!(out.report["operational_c1"], 1.0);
    assert_eq!(out.report["all_positive"], true);
}

#[test]
fn null_control_reaches_the_target() {
    let out = run(&wide(
        512,
        "T = 0.25\nschedule.kind = \"dyadic\"\n",
        ExperimentKind::Null,
    ))
    .unwrap();
    let r = &out.report;
    assert!(r["terminal_ratio"].as_f64().unwrap() <= 1e-6);
    assert_eq!(r["kind"], "dyadic");
    let keys: Vec<&String> = r.as_object().unwrap().keys().collect();
    assert_eq!(
        keys,
        [
            "T",
            "c3",
            "gamma_or_q",
            "kind",
            "n_max",
            "stop_rule",
            "sup_cost",
            "terminal_ratio"
        ]
    );
    let pieces = artifact(&out, "pieces.json");
    assert_eq!(pieces["argmax_piece"], 0);
    assert_eq!(pieces["boundary_violations"], 0);
    assert!(out.manifest.get("Q").is_some());
    assert!(out.artifacts.iter().any(|a| a.name == "trajectory.csv"));
}

#[test]
fn dyadic_cost_sweep_stays_under_its_bound() {
    let out = run(&wide(
        512,
        "T_grid = [0.5, 0.25, 0.125]\nschedule.kind = \"dyadic\"\n",
        ExperimentKind::Sweep,
    ))
    .unwrap();
    let r = &out.report;
    assert!(r["r_squared"].as_f64().unwrap() >= 0.9, "{r}");
    assert_eq!(r["slope_within_bound"], true);
    for run in r["runs"].as_array().unwrap() {
        assert_eq!(run["argmax_piece"], 0);
        assert!(run["terminal_ratio"].as_f64().unwrap() <= 1e-6);
    }
}

#[test]
fn poly4_cost_sweep_stays_under_its_bound() {
    let out = run(&wide(
        720,
        "T_grid = [0.5, 0.3333333333333333, 0.25]\nschedule.kind = \"poly4\"\n",
        ExperimentKind::Sweep,
    ))
    .unwrap();
    assert!(out.report["r_squared"].as_f64().unwrap() >= 0.9);
    assert_eq!(out.report["slope_within_bound"], true);
}

#[test]
fn finite_time_stabilizer_passes_its_checks() {
    let out = run(&wide(256, "T = 0.5\nLambda = 1.0\n", ExperimentKind::Finite)).unwrap();
    let r = &out.report;
    assert!(r["eps_zero_achieved"].as_f64().unwrap() <= 1e-6);
    assert!(r["uniform_stability"]["worst_ratio"].as_f64().unwrap() <= 1.0);
    let checks = artifact(&out, "finite_checks.json");
    for key in [
        "eps_zero_pass",
        "n_T_minimal",
        "truncated_inactive_second_period",
        "periodicity_exact",
        "uniform_pass",
    ] {
        assert_eq!(checks[key], true, "{key}");
    }
    assert_eq!(checks["branch_bound_violations"], 0);
    assert!(checks["composition_error"].as_f64().unwrap() <= 1e-8);
    for key in ["C1", "C2", "Gamma", "N_T", "n_T", "uniform.eta"] {
        assert!(out.manifest.get(key).is_some(), "{key}");
    }
}
