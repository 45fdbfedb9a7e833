use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn laa(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laa")).arg("--out").arg(out).args(args).env_remove("LAA_OUT").output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// The first summary row; a single row prints as a bare object.
fn first_row(text: &str) -> Value {
    match serde_json::from_str(text).unwrap() {
        Value::Array(mut rows) => rows.remove(0),
        row => row,
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn scenarios_lists_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&laa(dir.path(), &["scenarios"]));
    for id in ["ieee39-fast-single", "ieee39-slow-single", "ieee39-fast-logistic", "ieee39-fast-multi"] {
        assert!(text.contains(id), "{id} missing");
    }
}

#[test]
fn simulate_reports_the_fast_breach() {
    let dir = tempfile::tempdir().unwrap();
    ok(&laa(dir.path(), &["simulate", "--scenario", "ieee39-fast-single", "--duration", "12.5"]));
    let b = read_json(&dir.path().join("breach.json"));
    assert_eq!(b["breach"], "yes");
    let t = b["time_s"].as_f64().unwrap();
    assert!((5.0..12.5).contains(&t), "breach at {t}");
    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(traj.lines().count() > 100);
}

#[test]
fn simulate_without_attack_stays_put() {
    let dir = tempfile::tempdir().unwrap();
    ok(&laa(dir.path(), &["simulate", "--case", "ieee6", "--no-attack", "--duration", "5"]));
    assert_eq!(read_json(&dir.path().join("breach.json"))["breach"], "none");
}

#[test]
fn sr_estimate_writes_result_files_and_repeats_exactly() {
    let run = |dir: &Path| {
        let text = ok(&laa(dir, &["--seed", "5", "--format", "json", "estimate", "--scenario", "ieee39-fast-single", "--estimator", "sr", "--window", "12"]));
        assert!(first_row(&text)["eta2"].as_f64().unwrap() < 5.0, "{text}");
        let mut res = read_json(&dir.join("ieee39-fast-single-sr.json"));
        res.as_object_mut().unwrap().remove("seconds");
        res
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(a.path()), run(b.path()));
    assert!(a.path().join("ieee39-fast-single-sr.csv").exists());
}

#[test]
fn validate_case_prints_the_residual() {
    let dir = tempfile::tempdir().unwrap();
    let case = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/cases/ieee6.json");
    let text = ok(&laa(dir.path(), &["--format", "json", "validate-case", case]));
    assert!(first_row(&text)["equilibrium_residual"].as_f64().unwrap() < 1e-9, "{text}");
}

#[test]
fn bad_input_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["estimate", "--scenario", "ieee39-fast-single", "--estimator", "sr", "--window", "0"],
        &["estimate", "--scenario", "no-such", "--estimator", "sr"],
        &["simulate", "--case", "ieee6"],
        &["validate-case", "/nonexistent/case.json"],
    ];
    for args in cases {
        let o = laa(dir.path(), args);
        assert!(!o.status.success(), "{args:?} succeeded");
        assert!(!o.stderr.is_empty());
    }
    assert!(!dir.path().join("trajectory.csv").exists());
}

#[test]
fn config_file_overrides_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"scenario": {"window": [0.0, 3.0]}}"#).unwrap();
    ok(&laa(dir.path(), &["--config", cfg.to_str().unwrap(), "simulate", "--scenario", "ieee39-fast-single"]));
    let b = read_json(&dir.path().join("breach.json"));
    assert_eq!(b["breach"], "none");
    assert_eq!(b["duration_s"], 3.0);
}

#[test]
fn custom_case_attack_drives_the_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let attack = dir.path().join("attack.json");
    std::fs::write(&attack, r#"{"sensing": [2], "gains": [[5, 2, 6.0]], "steps": [[5, 0.1]]}"#).unwrap();
    let args = ["--format", "json", "estimate", "--case", "ieee6", "--attack", attack.to_str().unwrap(), "--estimator", "sr", "--window", "4", "--sigma", "1e-4"];
    let row = first_row(&ok(&laa(dir.path(), &args)));
    assert!(row["eta2"].as_f64().unwrap() < 0.01, "{row}");
}
