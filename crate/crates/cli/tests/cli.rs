use serde_json::Value;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ifcert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifcert"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}); stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const IDENTITY: &str = r#"{"input_dim":1,"layers":[{"weights":[[1.0]],"biases":[0.0],"activation":"identity"}]}"#;
const LINF: &str = r#"{"type":"weighted_lp","p":"inf","theta":[1.0]}"#;

#[test]
fn certify_identity_net() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "m.json", IDENTITY);
    let metric = write(dir.path(), "d.json", LINF);
    let out = ifcert(&["certify", "--model", &model, "--metric", &metric, "--eps", "0.3"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert!((v["delta_upper"].as_f64().unwrap() - 0.3).abs() <= 1e-5);
    assert_eq!(v["status"], "converged");
    let w = &v["witness"];
    assert!((w["delta_recomputed"].as_f64().unwrap() - 0.3).abs() <= 1e-9);
    let gap = w["x_prime"][0].as_f64().unwrap() - w["x_dprime"][0].as_f64().unwrap();
    assert!((gap.abs() - 0.3).abs() <= 1e-9);
    assert_eq!(v["config"]["grid_m"], 32);
}

#[test]
fn progress_stream_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(
        dir.path(),
        "m.json",
        r#"{"input_dim":2,"layers":[
            {"weights":[[1.5,-2.0],[0.7,1.1],[-1.3,0.4]],"biases":[0.1,-0.2,0.3],"activation":"relu"},
            {"weights":[[1.0,-2.0,1.5]],"biases":[0.0],"activation":"sigmoid"}]}"#,
    );
    let metric = write(dir.path(), "d.json", r#"{"type":"weighted_lp","p":"inf","theta":[1.0,0.5]}"#);
    let out = ifcert(&["certify", "--model", &model, "--metric", &metric, "--progress"]);
    assert_eq!(out.status.code(), Some(0));
    let lines: Vec<Value> = String::from_utf8(out.stderr.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    for pair in lines.windows(2) {
        assert!(pair[1]["delta_lower"].as_f64() >= pair[0]["delta_lower"].as_f64());
        assert!(pair[1]["delta_upper"].as_f64() <= pair[0]["delta_upper"].as_f64());
    }
    let v = stdout_json(&out);
    assert!(v["delta_lower"].as_f64().unwrap() <= v["delta_upper"].as_f64().unwrap() + 1e-5);
}

#[test]
fn node_limit_exits_with_anytime_code() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(
        dir.path(),
        "m.json",
        r#"{"input_dim":1,"layers":[{"weights":[[4.0]],"biases":[0.0],"activation":"sigmoid"}]}"#,
    );
    let metric = write(dir.path(), "d.json", LINF);
    let out = ifcert(&["certify", "--model", &model, "--metric", &metric, "--node-limit", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let v = stdout_json(&out);
    assert_eq!(v["status"], "node_limit");
    assert!(v["delta_upper"].as_f64().unwrap() >= v["delta_lower"].as_f64().unwrap());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "m.json", IDENTITY);
    let metric = write(dir.path(), "d.json", r#"{"type":"weighted_lp","p":"inf","theta":[1.0,1.0]}"#);
    let out = ifcert(&["certify", "--model", &model, "--metric", &metric]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = ifcert(&["certify", "--model", "/nonexistent.json", "--metric", &metric]);
    assert_eq!(out.status.code(), Some(1));
}

/// Small two-group dataset: the label follows `a`, `proxy` tracks the group.
fn toy_csv() -> String {
    let mut s = String::from("a,proxy,group,noise,label\n");
    for i in 0..60 {
        let a = (i * 37 % 60) as f64 / 60.0;
        let g = if i % 2 == 0 { "x" } else { "y" };
        let proxy = if g == "x" { 0.2 + a * 0.1 } else { 0.8 - a * 0.1 };
        let label = if a > 0.5 { "yes" } else { "no" };
        writeln!(s, "{a},{proxy},{g},{},{label}", (i * 13 % 7) as f64).unwrap();
    }
    s
}

const TOY_SCHEMA: &str = r#"{
  "features": [
    {"name": "a", "kind": "continuous"},
    {"name": "proxy", "kind": "continuous"},
    {"name": "group", "kind": "categorical", "sensitive": true},
    {"name": "noise", "kind": "continuous"}
  ],
  "label": {"name": "label", "positive": "yes"}
}"#;

#[test]
fn learn_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "data.csv", &toy_csv());
    let schema = write(dir.path(), "schema.json", TOY_SCHEMA);
    let metric = dir.path().join("metric.json").to_string_lossy().into_owned();
    let out = ifcert(&["learn-metric", "--data", &data, "--schema", &schema, "--out", &metric]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["sensitive"], serde_json::json!([2, 3]));

    let model = dir.path().join("fair.json").to_string_lossy().into_owned();
    let log = dir.path().join("log.jsonl").to_string_lossy().into_owned();
    let train_args = [
        "train", "--data", &data, "--schema", &schema, "--metric", &metric, "--out", &model, "--log", &log,
        "--epochs", "4", "--hidden", "4", "--grid-m", "4", "--learning-rate", "0.5", "--seed", "3",
    ];
    let out = ifcert(&train_args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let trained = stdout_json(&out);
    let log_lines: Vec<Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log_lines.len(), 4);
    assert_eq!(log_lines[0]["lambda"], 1.0);
    assert!(log_lines[0]["mean_fair_term"].is_null());
    assert_eq!(log_lines[3]["lambda"], 0.5);
    assert!(log_lines[3]["mean_fair_term"].as_f64().is_some());

    // the held-out metrics reported by train are reproduced by eval
    let features = trained["features"].as_str().unwrap().to_owned();
    assert!(Path::new(&features).exists());
    let first_model = fs::read_to_string(&model).unwrap();
    let out = ifcert(&["eval", "--model", &model, "--data", &data, "--schema", &schema, "--seed", "3", "--split", "train"]);
    let v = stdout_json(&out);
    for key in ["accuracy", "balanced_accuracy", "eod", "n"] {
        assert_eq!(v[key], trained["train"][key], "{key}");
    }
    let out = ifcert(&["eval", "--model", &model, "--data", &data, "--schema", &schema, "--seed", "3"]);
    let v = stdout_json(&out);
    assert_eq!(v["split"], "test");
    assert_eq!(v["n"], 12);
    assert_eq!(v["balanced_accuracy"], trained["test"]["balanced_accuracy"]);

    // same seed, same weights
    let out = ifcert(&train_args);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&model).unwrap(), first_model);

    // certify the trained model over its own feature domain
    let out = ifcert(&[
        "certify", "--model", &model, "--metric", &metric, "--features", &features, "--grid-m", "8", "--cutoff", "60",
    ]);
    let v = stdout_json(&out);
    assert!(v["delta_upper"].as_f64().unwrap() >= v["delta_lower"].as_f64().unwrap() - 1e-5);
    let raw = &v["witness"]["x_prime_raw"];
    assert_eq!(raw.as_array().unwrap().len(), 5);
}

#[test]
fn ftu_ignores_sensitive_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "data.csv", &toy_csv());
    let schema = write(dir.path(), "schema.json", TOY_SCHEMA);
    let model = dir.path().join("ftu.json").to_string_lossy().into_owned();
    let out = ifcert(&[
        "train", "--data", &data, "--schema", &schema, "--mode", "ftu", "--out", &model, "--epochs", "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let net: Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    for row in net["layers"][0]["weights"].as_array().unwrap() {
        assert_eq!(row[2], 0.0);
        assert_eq!(row[3], 0.0);
    }
}

#[test]
fn fair_mode_requires_metric() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "data.csv", &toy_csv());
    let schema = write(dir.path(), "schema.json", TOY_SCHEMA);
    let model = dir.path().join("m.json").to_string_lossy().into_owned();
    let out = ifcert(&["train", "--data", &data, "--schema", &schema, "--out", &model]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--metric"));
}
