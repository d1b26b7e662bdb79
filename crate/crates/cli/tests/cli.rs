use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cclab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cclab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn cclab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).expect("read")).expect("json")
}

#[test]
fn list_structures_shows_builtins() {
    let dir = tempfile::tempdir().unwrap();
    let o = cclab(dir.path(), &["list-structures", "--json"]);
    assert_eq!(code(&o), 0);
    let rows: Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<&str> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    for n in [
        "euclidean2",
        "heisenberg",
        "martinet",
        "flat_nonbracket",
        "grushin",
        "duplicated_line",
    ] {
        assert!(names.contains(&n), "{n} missing");
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cclab(dir.path(), &["extremal", "--bogus"])), 2);
    assert_eq!(
        code(&cclab(
            dir.path(),
            &["extremal", "--structure", "nope", "--covector", "1,0,0"]
        )),
        2
    );
    // Missing structure altogether.
    assert_eq!(code(&cclab(dir.path(), &["extremal", "--covector", "1,0,0"])), 2);
    // Point outside the domain.
    let o = cclab(
        dir.path(),
        &["calibrate", "--structure", "heisenberg", "--point", "9,0,0"],
    );
    assert_eq!(code(&o), 2);
    // Hamiltonian flow is refused for continuous frames.
    let o = cclab(dir.path(), &["extremal", "--structure", "grushin", "--covector", "1,0"]);
    assert_eq!(code(&o), 2);
    let o = cclab(dir.path(), &["diameter", "--structure", "grushin", "--regime", "C11"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn extremal_writes_trajectory_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = cclab(
        dir.path(),
        &[
            "extremal",
            "--structure",
            "heisenberg",
            "--covector",
            "1,0,0.5",
            "--steps",
            "200",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("extremal.csv")).unwrap();
    assert_eq!(csv.lines().count(), 202);
    let m = read_json(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "extremal");
    assert!(m["timestamp"].is_string());
}

#[test]
fn calibrate_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let o = cclab(
        dir.path(),
        &["calibrate", "--structure", "heisenberg", "--verify", "500"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("calibration_report.json").exists());
    let file = dir.path().join("calibration.json");
    let v = dir.path().join("v");
    let o = cclab(
        &v,
        &["verify", "--file", file.to_str().unwrap(), "--samples", "500", "--json"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(v.join("verify.json").exists());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format\": \"calibration\", \"oops\": 1}").unwrap();
    let o = cclab(&v, &["verify", "--file", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema error"));
}

#[test]
fn quasi_calibrate_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let o = cclab(
        dir.path(),
        &["quasi-calibrate", "--structure", "grushin", "--samples", "256"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let file = dir.path().join("quasicalibration.json");
    let o = cclab(
        dir.path(),
        &["verify", "--file", file.to_str().unwrap(), "--samples", "256"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn distance_reports_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let o = cclab(
        dir.path(),
        &[
            "distance",
            "--structure",
            "euclidean2",
            "--from",
            "0,0",
            "--to",
            "3,4",
            "--json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["status"], "finite");
    assert!((v["upper"].as_f64().unwrap() - 5.0).abs() < 1e-6);
    assert!((v["lower"].as_f64().unwrap() - 5.0).abs() < 1e-6);
    assert!(dir.path().join("witness.csv").exists());
    assert!(dir.path().join("distance.json").exists());
}

#[test]
fn diameter_sweep_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{ "structure": "euclidean2", "seed": 3, "diameter": { "radii": [0.1, 0.05], "cloud": 2, "target_ratio": 0.998 } }"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = cclab(&out, &["diameter", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("diameter.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["resolved_config"]["seed"], 3);

    std::fs::write(&cfg, r#"{ "structure": "euclidean2", "diameterr": {} }"#).unwrap();
    assert_eq!(code(&cclab(&out, &["diameter", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn inline_structure_definition() {
    let dir = tempfile::tempdir().unwrap();
    let def = dir.path().join("plane.json");
    std::fs::write(
        &def,
        r#"{ "name": "plane", "n": 2, "m": 2, "regularity": "C11",
             "domain": { "min": [-1, -1], "max": [1, 1] },
             "fields": [["1", "0"], ["0", "1"]] }"#,
    )
    .unwrap();
    let o = cclab(
        dir.path(),
        &[
            "distance",
            "--structure",
            def.to_str().unwrap(),
            "--from",
            "0,0",
            "--to",
            "0.3,0.4",
            "--json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["upper"].as_f64().unwrap() - 0.5).abs() < 1e-6);
}

#[test]
fn repeated_runs_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "diameter",
        "--structure",
        "heisenberg",
        "--radii",
        "0.05",
        "--cloud",
        "1",
        "--seed",
        "5",
    ];
    assert_eq!(code(&cclab(a.path(), &args)), 0);
    assert_eq!(code(&cclab(b.path(), &args)), 0);
    for f in ["diameter.csv", "diameter.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
}
