use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn levisim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_levisim")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn read_csv(p: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let h = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|x| x.parse().unwrap_or(f64::NAN)).collect())
        .collect();
    (h, rows)
}

fn schema(name: &str) -> Value {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs").join(name);
    read_json(&p)
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn predict_matches_closed_forms() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("p");
    let o = levisim(&["predict", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&out.join("predict.csv"));
    let col = |n: &str| h.iter().position(|x| x == n).unwrap();
    let w = 2.0 * PI * 92e3;
    for r in &rows {
        let tau = r[col("tau_s")];
        let want = 1.0 + (w * tau).powi(2) / 2.0;
        assert!((r[col("relative_energy")] / want - 1.0).abs() < 1e-12);
    }
    let last = rows.last().unwrap();
    assert!((last[col("tau_s")] - 100e-6).abs() < 1e-15);
    assert!((last[col("max_std_m")] / 4.3e-9 - 1.0).abs() < 0.05, "{}", last[col("max_std_m")]);
    assert!((54.0..60.0).contains(&last[col("expansion_factor")]));
}

#[test]
fn outputs_validate_against_schemas() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("s");
    let cfg = write_config(d.path(), r#"{"protocols": {"scan": {"n_points": 5, "repetitions": 2}}}"#);
    let o = levisim(&["scan", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&out.join("summary.json"));
    let manifest = read_json(&out.join("manifest.json"));
    jsonschema::validate(&schema("summary.schema.json"), &summary).unwrap();
    jsonschema::validate(&schema("manifest.schema.json"), &manifest).unwrap();
    jsonschema::validate(&schema("config.schema.json"), &read_json(Path::new(&cfg))).unwrap();
    assert_eq!(summary["config_hash"], manifest["config_hash"]);
    let files: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert_eq!(files, ["scan.csv", "scan_mean.csv", "summary.json"]);
}

#[test]
fn config_schema_rejects_unknown_keys() {
    let bad = serde_json::json!({"protocols": {"scan": {"volts": 3}}});
    assert!(!jsonschema::is_valid(&schema("config.schema.json"), &bad));
}

#[test]
fn reruns_are_byte_identical_and_seeds_differ() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), r#"{"protocols": {"scan": {"n_points": 5, "repetitions": 2}}}"#);
    let run = |name: &str, seed: &str| {
        let out = d.path().join(name);
        let o = levisim(&["scan", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        std::fs::read(out.join("scan.csv")).unwrap()
    };
    let (a, b, c) = (run("a", "3"), run("b", "3"), run("c", "4"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn repetition_override_changes_the_hash() {
    let d = tempfile::tempdir().unwrap();
    let hash = |reps: &str| {
        let out = d.path().join(format!("r{reps}"));
        let o = levisim(&["predict", "--reps", reps, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        read_json(&out.join("summary.json"))["config_hash"].as_str().unwrap().to_string()
    };
    assert_ne!(hash("3"), hash("4"));
}

#[test]
fn analyze_recovers_a_sine() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("trace.csv");
    let mut w = csv::Writer::from_path(&input).unwrap();
    w.write_record(["time_s", "z_m"]).unwrap();
    let (a, f, ph) = (2.5e-9, 92e3, 0.4);
    for k in 0..2000 {
        let t = k as f64 * 5e-8;
        w.write_record([t.to_string(), (a * (2.0 * PI * f * t + ph).sin()).to_string()]).unwrap();
    }
    w.flush().unwrap();
    let out = d.path().join("fit");
    let o = levisim(&[
        "analyze", "--input", input.to_str().unwrap(), "--fit", "sine", "--frequency", "92000", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = &read_json(&out.join("summary.json"))["result"];
    assert!((r["amplitude"].as_f64().unwrap() / a - 1.0).abs() < 1e-6, "{r}");
    assert!((r["phase"].as_f64().unwrap() - ph).abs() < 1e-6);
}

#[test]
fn analyze_rejects_a_missing_column() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("t.csv");
    std::fs::write(&input, "a,b\n1,2\n2,4\n3,6\n").unwrap();
    let o = levisim(&["analyze", "--input", input.to_str().unwrap(), "--fit", "line", "--y", "c"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no column named c"));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&levisim(&["--help"])), 0);
    assert_eq!(code(&levisim(&["--version"])), 0);
    assert_eq!(code(&levisim(&["frobnicate"])), 1);
    assert_eq!(code(&levisim(&["scan", "--seed", "minus-one"])), 1);

    let cfg = write_config(d.path(), r#"{"particle": {"mass": -1}}"#);
    let o = levisim(&["predict", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("particle.mass"));

    let cfg = write_config(d.path(), r#"{"protocols": {"scan": {"volts": [1, 2]}}}"#);
    let o = levisim(&["scan", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("protocols.scan"));

    // The output directory cannot be created below a regular file.
    let blocker = d.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = levisim(&["predict", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code(&o), 3);

    let cfg = write_config(
        d.path(),
        r#"{"environment": {"nonelectrostatic_force": [0, 0, 1e-11]}, "protocols": {"simulate": {"duration": 2e-5}}}"#,
    );
    let out = d.path().join("lost");
    let o = levisim(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("trajectory.csv").exists());
    assert_eq!(read_json(&out.join("summary.json"))["result"]["lost"], true);
}
