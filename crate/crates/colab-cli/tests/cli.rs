//! Exit-code and error-path behavior of the binary: 0 done, 1 incomplete
//! experiment, 2 bad input, 3 numerical blow-up.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colab")).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(p: &Path, s: &str) {
    std::fs::write(p, s).unwrap();
}

const TINY_SPEC: &str = r#"{
  "image_size": 32,
  "organ_semiaxis": [6.0, 9.0],
  "roi_radius": [1.5, 2.5],
  "distractor_radius": [1.5, 2.5],
  "distractor_count": [1, 2],
  "distractor_band": [5.0, 12.0],
  "mu_background": 0.0,
  "mu_organ": 0.35,
  "mu_roi": 0.75,
  "mu_distractor": 0.75,
  "distractor_halo": 2.0,
  "noise_sigma": 0.05,
  "n_train": 3,
  "n_test": 2,
  "seed": 5
}"#;

fn tiny_cfg(overrides: &str) -> String {
    let mut v: serde_json::Value = serde_json::json!({
        "t": 2, "alpha": 0.02, "beta": 0.001, "momentum": 0.9,
        "m": 4.0, "tau": 3.0, "update_period": 2, "inner_steps": 1,
        "epochs": 1, "iters_per_epoch": 2, "batch_size": 2,
        "patch_size": 16, "roi_patch_fraction": 0.5,
        "base_width": 2, "depth": 1, "seed": 0
    });
    if !overrides.is_empty() {
        let o: serde_json::Value = serde_json::from_str(overrides).unwrap();
        for (k, val) in o.as_object().unwrap() {
            v[k] = val.clone();
        }
    }
    v.to_string()
}

#[test]
fn unknown_arm_is_a_usage_error() {
    let out = run(&["train", "--config", "x.json", "--arm", "bogus", "--data", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_field_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, &tiny_cfg(r#"{"alhpa": 0.5}"#));
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--arm",
        "none",
        "--data",
        "d",
        "--out",
        "o",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("alhpa"), "stderr: {}", stderr(&out));
}

#[test]
fn invalid_config_value_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, &tiny_cfg(r#"{"t": 1}"#));
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--arm",
        "colab",
        "--data",
        "d",
        "--out",
        "o",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("t must be >= 2"), "stderr: {}", stderr(&out));
}

#[test]
fn bad_task_spec_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, &TINY_SPEC.replace("\"image_size\": 32", "\"image_size\": 8"));
    let out = run(&["gen-data", "--config", spec.to_str().unwrap(), "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("image_size"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_dataset_dir_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, &tiny_cfg(""));
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--arm",
        "none",
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resume_with_a_different_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).display().to_string();
    write(&dir.path().join("spec.json"), TINY_SPEC);
    assert!(run(&["gen-data", "--config", &d("spec.json"), "--out", &d("data")])
        .status
        .success());
    write(&dir.path().join("cfg.json"), &tiny_cfg(""));
    let args = |cfg: &str| {
        vec![
            "train".to_string(),
            "--config".into(),
            d(cfg),
            "--arm".into(),
            "none".into(),
            "--data".into(),
            d("data"),
            "--out".into(),
            d("run"),
        ]
    };
    assert!(run(&args("cfg.json").iter().map(String::as_str).collect::<Vec<_>>())
        .status
        .success());
    write(&dir.path().join("cfg2.json"), &tiny_cfg(r#"{"alpha": 0.03}"#));
    let out = run(&args("cfg2.json").iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("config"), "stderr: {}", stderr(&out));
}

#[test]
fn plan_with_duplicate_arm_rows_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    write(
        &plan,
        &format!(
            r#"{{
  "arms": [
    {{"arm": "none", "t": 2, "seeds": [0]}},
    {{"arm": "none", "t": 2, "seeds": [1]}}
  ],
  "config": {},
  "dataset": "data",
  "out": "cmp"
}}"#,
            tiny_cfg("")
        ),
    );
    let out = run(&["compare", "--plan", plan.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failing_plan_row_yields_gap_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).display().to_string();
    write(&dir.path().join("spec.json"), TINY_SPEC);
    assert!(run(&["gen-data", "--config", &d("spec.json"), "--out", &d("data")])
        .status
        .success());
    // dilation only defines one extra class, so t=4 cannot be satisfied and
    // that row must come back as a gap without sinking the others
    write(
        &dir.path().join("plan.json"),
        &format!(
            r#"{{
  "arms": [
    {{"arm": "none", "t": 2, "seeds": [0]}},
    {{"arm": "dilated", "t": 4, "seeds": [0]}}
  ],
  "config": {},
  "dataset": "data",
  "out": "cmp"
}}"#,
            tiny_cfg("")
        ),
    );
    let out = run(&["compare", "--plan", &d("plan.json")]);
    assert_eq!(out.status.code(), Some(1));
    let summary = std::fs::read_to_string(dir.path().join("cmp/summary.csv")).unwrap();
    let gap_row = summary.lines().find(|l| l.starts_with("dilated,")).unwrap();
    assert!(gap_row.contains("--"), "summary: {summary}");
    let ok_row = summary.lines().find(|l| l.starts_with("none,")).unwrap();
    assert!(!ok_row.contains("--"), "summary: {summary}");
}
