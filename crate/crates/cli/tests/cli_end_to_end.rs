use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const DESK: &str = r#"
domain.kind = "interval"
domain.lengths = [3.141592653589793]
omega.bounds = [[1.0, 2.0]]
modes.M = 256
"#;

fn heatstab(sub: &str, config: &str, dir: &TempDir, out: &str) -> Output {
    let cfg = dir.path().join(format!("{out}.toml"));
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_heatstab"))
        .args([sub, "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join(out))
        .output()
        .unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn spectral_reports_the_fit() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{DESK}lambda_grid = [4.0, 16.0, 36.0, 64.0, 100.0]\n");
    let o = heatstab("spectral", &cfg, &dir, "spec");
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&dir.path().join("spec/report.json"));
    assert!(report["r_squared"].as_f64().unwrap() >= 0.9);
    assert_eq!(report["all_positive"], Value::Bool(true));
    let manifest = read_json(&dir.path().join("spec/manifest.json"));
    assert_eq!(manifest["constants"]["C1"]["provenance"], "fitted");
    assert_eq!(manifest["config"]["seed"], 0);
}

#[test]
fn rapid_writes_csv_and_decays_fast_enough() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{DESK}lambda = 10.0\nc1_override = 3.073\nseed = 3\n");
    let o = heatstab("rapid", &cfg, &dir, "rapid");
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&dir.path().join("rapid/report.json"));
    assert!(report["decay_rate"].as_f64().unwrap() >= 5.0);
    assert_eq!(report["bound_violations"], 0);
    let csv = fs::read_to_string(dir.path().join("rapid/trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,norm_y,norm_low,norm_tail,norm_u,V,V1");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 257);
    assert!(rows.iter().all(|r| r.len() == 7));
    let manifest = read_json(&dir.path().join("rapid/manifest.json"));
    for key in ["C1", "C2", "N", "gamma", "horizon"] {
        assert!(manifest["constants"][key].is_object(), "{key} missing from manifest");
    }
    assert_eq!(manifest["constants"]["C1"]["provenance"], "supplied");
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{DESK}lambda = 10.0\nc1_override = 3.073\nseed = 9\n");
    for out in ["a", "b"] {
        assert!(heatstab("rapid", &cfg, &dir, out).status.success());
    }
    for file in ["report.json", "trajectory.csv"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let mut ma = read_json(&dir.path().join("a/manifest.json"));
    let mut mb = read_json(&dir.path().join("b/manifest.json"));
    ma["wall_clock"] = Value::Null;
    mb["wall_clock"] = Value::Null;
    assert_eq!(ma, mb);
}

#[test]
fn json_keys_are_sorted() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{DESK}c1_override = 3.073\n");
    assert!(heatstab("rapid", &cfg, &dir, "r").status.success());
    let text = fs::read_to_string(dir.path().join("r/report.json")).unwrap();
    let keys: Vec<&str> = text
        .lines()
        .filter_map(|l| l.trim_start().strip_prefix('"'))
        .map(|l| &l[..l.find('"').unwrap()])
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn config_errors_exit_with_2_and_name_the_key() {
    let dir = TempDir::new().unwrap();
    let cases = [
        (
            "null",
            format!("{DESK}T = 0.3\nschedule.kind = \"poly4\"\n"),
            "1/T not integer",
        ),
        ("spectral", DESK.replace("3.141592653589793", "-1.0"), "domain.lengths"),
        ("rapid", format!("{DESK}speed = 1\n"), "speed"),
        ("rapid", format!("{DESK}lambda = \"fast\"\n"), "lambda"),
        (
            "rapid",
            format!("{DESK}experiment.kind = \"null\"\n"),
            "experiment.kind",
        ),
        ("rapid", "domain.kind = [".to_string(), "<document>"),
    ];
    for (i, (sub, cfg, needle)) in cases.iter().enumerate() {
        let o = heatstab(sub, cfg, &dir, &format!("bad{i}"));
        assert_eq!(o.status.code(), Some(2), "{sub}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{}", stderr(&o));
        assert!(!dir.path().join(format!("bad{i}")).exists());
    }
}

#[test]
fn unresolved_schedules_exit_with_3() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{DESK}T = 0.25\nc1_override = 3.073\n");
    let o = heatstab("null", &cfg, &dir, "null");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("schedule tail"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_heatstab"))
        .args(["rapid", "--config", "/nonexistent/x.toml", "--out"])
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
