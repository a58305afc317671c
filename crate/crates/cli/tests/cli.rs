use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sso(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sso"))
        .args(args)
        .env("SPHERE_OUT_DIR", out_dir)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn repo_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn mlp_config(optimizer: &str, extra: &str) -> String {
    format!(
        r#"{{
  "task": {{ "data": {{ "kind": "synthetic_regression", "teacher_seed": 1 }}, "batch_size": 16, "steps": 40 }},
  "model": {{ "kind": "mlp", "d_in": 8, "d_hidden": 16, "d_out": 2 }},
  "optimizer": "{optimizer}",
  "run_name": "t"{extra}
}}"#
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn train_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &mlp_config("sso", ""));
    let out = sso(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("final_loss"));
    let jsonl = std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 40);
    let first: Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert!(first["per_module"]["layer0"]["spectral_norm"].is_f64());
    let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(csv.starts_with("step,loss,"));
    assert!(dir.path().join("t.config.json").exists());
}

#[test]
fn train_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = write(a.path(), "c.json", &mlp_config("muon", ""));
    assert!(sso(&["train", "--config", cfg.to_str().unwrap()], a.path()).status.success());
    assert!(sso(&["train", "--config", cfg.to_str().unwrap()], b.path()).status.success());
    for f in ["t.jsonl", "t.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", "{\n  \"task\": {\n    \"batch_size\": ,\n}\n");
    let out = sso(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &mlp_config("sso", r#", "learning_rate": 0.1"#));
    let out = sso(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learning_rate"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sso(&["train", "--config", "/nonexistent/c.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "adamw": { "eta": 10.0 }"#;
    let cfg = mlp_config("adamw", extra).replace("\"steps\": 40", "\"steps\": 200");
    let cfg = write(dir.path(), "c.json", &cfg);
    let out = sso(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("DivergenceDetected"));
}

#[test]
fn sweep_writes_one_row_per_cell_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "sweep": { "widths": [8, 16, 32], "etas": [0.01, 0.05] }"#;
    let cfg = write(dir.path(), "c.json", &mlp_config("sso", extra));
    let out = sso(&["sweep", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let csv_path = dir.path().join("t_sweep.csv");
    let first = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(first.lines().count(), 1 + 3 * 2);
    assert!(sso(&["sweep", "--config", cfg.to_str().unwrap()], dir.path()).status.success());
    assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), first);
}

#[test]
fn sweep_with_every_cell_diverging_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "sweep": { "widths": [8, 16], "etas": [20.0, 50.0] }"#;
    let cfg = mlp_config("adamw", extra).replace("\"steps\": 40", "\"steps\": 200");
    let cfg = write(dir.path(), "c.json", &cfg);
    let out = sso(&["sweep", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn sweep_without_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &mlp_config("sso", ""));
    let out = sso(&["sweep", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pingpong_balances_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let w = repo_file("workload_example.json");
    let out = sso(&["place", "--workload", w.to_str().unwrap(), "--ranks", "4"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let rep: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(rep["policy"], "pingpong");
    assert_eq!(rep["imbalance"], 0.0);
    assert_eq!(rep["per_rank_load"], serde_json::json!([11.0, 11.0, 11.0, 11.0]));
}

#[test]
fn policy_all_prints_three_reports() {
    let dir = tempfile::tempdir().unwrap();
    let w = repo_file("workload_example.json");
    let out = sso(&["place", "--workload", w.to_str().unwrap(), "--ranks", "4", "--policy", "all"], dir.path());
    assert!(out.status.success());
    let reps: Vec<Value> = serde_json::from_str(&stdout(&out)).unwrap();
    let names: Vec<&str> = reps.iter().map(|r| r["policy"].as_str().unwrap()).collect();
    assert_eq!(names, ["pingpong", "greedy", "roundrobin"]);
}

#[test]
fn bad_workloads_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "e.json", "[]");
    let out = sso(&["place", "--workload", empty.to_str().unwrap(), "--ranks", "2"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let junk = write(dir.path(), "j.json", r#"[{"module_name": "a"}]"#);
    let out = sso(&["place", "--workload", junk.to_str().unwrap(), "--ranks", "2"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn moe_factor_defaults_are_near_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = sso(&["moe-factor"], dir.path());
    assert!(out.status.success());
    let est: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let mean = est["mean"].as_f64().unwrap();
    assert!((mean - 2.0).abs() < 0.01, "mean {mean}");
    assert!(est["std_error"].as_f64().unwrap() > 0.0);
}

#[test]
fn moe_factor_rejects_bad_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = sso(&["moe-factor", "--k", "70"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = sso(&["moe-factor", "--n-total", "4", "--n-shared", "4"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sso(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(sso(&["place", "--ranks", "2"], dir.path()).status.code(), Some(1));
    assert_eq!(sso(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn shipped_configs_parse() {
    for name in ["mlp_sso.json", "mlp_width_sweep.json", "transformer_char_lm.json"] {
        let text = std::fs::read_to_string(repo_file(name)).unwrap();
        spectral_sphere::config::ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
