// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use npcore::pursuit::NPConfig;

fn nplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nplab")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, s: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, s).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn grad_check_passes() {
    let o = nplab(&["grad", "check", "--seed", "7", "--count", "10", "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("PASS rel_err="), "{}", stdout(&o));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(nplab(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(nplab(&["np", "walk"]).status.code(), Some(1));
    assert_eq!(nplab(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"task": {"task": "f1", "n_train": "many"}}"#);
    let o = nplab(&["np", "run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("task.n_train"), "{}", stderr(&o));
    let cfg = write(dir.path(), "d.json", r#"{"tsk": {}}"#);
    let o = nplab(&["np", "run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tsk"), "{}", stderr(&o));
}

#[test]
fn omp_compare_matches() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("omp");
    let o = nplab(&["omp", "compare", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(v["supports_match"], true);
    assert_eq!(v["np_support"], serde_json::json!([2, 0]));
    assert!(out.join("config.json").exists() && out.join("meta.json").exists());
}

fn diag_run_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "task": { "task": "diag_linear" },
        "np": serde_json::to_value(NPConfig::diagonal()).unwrap(),
        "lr_per_sample": false,
    });
    write(dir, "diag.json", &cfg.to_string())
}

#[test]
fn np_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = diag_run_config(dir.path());
    let mut summaries = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let o = nplab(&["np", "run", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).starts_with("CONVERGED"));
        assert_eq!(fs::read_to_string(out.join("config.json")).unwrap(), fs::read_to_string(&cfg).unwrap());
        assert!(out.join("iterations.csv").exists() && out.join("net.json").exists());
        summaries.push(fs::read(out.join("summary.json")).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);
}

#[test]
fn budget_exhaustion_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut np = NPConfig::diagonal();
    np.max_iters = 1;
    let cfg = serde_json::json!({ "task": { "task": "diag_linear" }, "np": np, "lr_per_sample": false });
    let p = write(dir.path(), "c.json", &cfg.to_string());
    assert_eq!(nplab(&["np", "run", "--config", &p, "--quiet"]).status.code(), Some(3));
}

#[test]
fn bench_gen_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "t.json", r#"{"task": "g1", "d": 6, "n_train": 20, "n_test": 5}"#);
    let out = dir.path().join("data");
    let o = nplab(&["bench", "gen", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let train = fs::read_to_string(out.join("train.csv")).unwrap();
    assert!(train.starts_with("x0,x1,x2,x3,x4,x5,y0"));
    assert_eq!(train.lines().count(), 21);
    let zero = r#"{"activation":{"p":1,"alpha":0.0},"layers":[[0,0,0,0,0,0],[0]],"shapes":[[1,6],[1,1]]}"#;
    let net = write(dir.path(), "net.json", zero);
    let o = nplab(&["np", "eval", "--net", &net, "--data", out.join("train.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("relative=1.000000e0"), "{}", stdout(&o));
}

#[test]
fn ncf_maximize_on_files() {
    let dir = tempfile::tempdir().unwrap();
    let net = write(
        dir.path(),
        "net.json",
        r#"{"activation":{"p":1,"alpha":0.0},"layers":[[1,0,0,1,0,0],[1,0],[1]],"shapes":[[2,3],[1,2],[1,1]]}"#,
    );
    let data = write(dir.path(), "d.csv", "x0,x1,x2,y0\n1,0,0,2\n0,1,0,0\n0,0,1,3\n1,1,1,1\n");
    let cfg = serde_json::json!({"net": net, "data": data, "layer": 1, "ascent": {"restarts": 3, "steps": 400}});
    let p = write(dir.path(), "c.json", &cfg.to_string());
    let o = nplab(&["ncf", "maximize", "--config", &p, "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("OK value="));
    let cfg = serde_json::json!({"layer": 1});
    let p = write(dir.path(), "bad.json", &cfg.to_string());
    let o = nplab(&["ncf", "maximize", "--config", &p]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`net`"));
}

#[test]
fn sumflow_default_instance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flow");
    let o = nplab(&["saddle", "sumflow", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(v["shares"][1].as_f64().unwrap() < 1e-3);
    assert!(out.join("curve.csv").exists());
}

#[test]
fn sq_relu_saddle_stays_put() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.json", r#"{"kind": "sq_relu", "d": 4, "lr": 0.05, "iters": 2000, "log_every": 100}"#);
    let out = dir.path().join("s");
    let o = nplab(&["saddle", "simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("iter,loss,loss_ratio"));
    assert_eq!(csv.lines().count(), 22);
}

#[test]
fn decomp_check_passes() {
    let o = nplab(&["decomp", "check", "--seed", "1", "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).starts_with("PASS"));
}
