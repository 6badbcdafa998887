use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nested_lqg::evaluation::{analytic_cost, closed_loop};
use nested_lqg::problem::{load_problem, random_instance, save_problem, BlockDims};
use nested_lqg::riccati::DEFAULT_LYAPUNOV_TOL;
use nested_lqg::synthesis::{synthesize, SynthesisOptions};
use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nested-lqg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_accepts_nested_instance() {
    let out = bin(&["validate", s(&data("simple.json"))]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("valid"));
}

#[test]
fn validate_reports_every_violation() {
    let out = bin(&["validate", s(&data("not_nested.json")), "--json"]);
    assert_eq!(out.status.code(), Some(1));
    let v = json(&out);
    assert!(!v["violations"].as_array().unwrap().is_empty());
}

#[test]
fn invalid_cost_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ctrl = dir.path().join("c.json");
    let out = bin(&["synth", s(&data("indefinite_cost.json")), "-o", s(&ctrl)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!ctrl.exists());
}

#[test]
fn unreadable_input_exits_with_io_code() {
    assert_eq!(bin(&["validate", s(&data("truncated.json"))]).status.code(), Some(3));
    assert_eq!(bin(&["validate", "/nonexistent/problem.json"]).status.code(), Some(3));
    assert_eq!(bin(&["synth"]).status.code(), Some(3));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn synth_then_analyze_matches_library_cost() {
    let dir = tempfile::tempdir().unwrap();
    let ctrl = dir.path().join("c.json");
    let problem = data("simple.json");
    let out = bin(&["synth", s(&problem), "-o", s(&ctrl), "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["q"], 4);

    let out = bin(&["analyze", s(&problem), s(&ctrl), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let j_cli = v["j_total"].as_f64().unwrap();

    let inst = load_problem(&problem).unwrap();
    let syn = synthesize(&inst, &SynthesisOptions::default()).unwrap();
    let j_lib = analytic_cost(&closed_loop(&inst, &syn.realization).unwrap(), DEFAULT_LYAPUNOV_TOL).unwrap();
    assert!((j_cli - j_lib).abs() <= 1e-9 * j_lib.max(1.0), "{j_cli} vs {j_lib}");
    assert_eq!(v["information_pattern_ok"], true);
    assert!(v["decomposition"]["j_hat_z"].as_f64().unwrap() > 0.0);
    assert_eq!(v["provenance"]["coupled_tol"].as_f64().unwrap(), 1e-9);
}

#[test]
fn analyze_rejects_controller_for_other_dims() {
    let dir = tempfile::tempdir().unwrap();
    let big = dir.path().join("big.json");
    let ctrl = dir.path().join("c.json");
    save_problem(&random_instance(3, BlockDims::new(2, 1, 1, 1, 1, 1), 0.8).unwrap(), &big).unwrap();
    assert_eq!(bin(&["synth", s(&big), "-o", s(&ctrl)]).status.code(), Some(0));
    let out = bin(&["analyze", s(&data("simple.json")), s(&ctrl)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ctrl = dir.path().join("c.json");
    let problem = data("simple.json");
    assert_eq!(bin(&["synth", s(&problem), "-o", s(&ctrl)]).status.code(), Some(0));
    let args = ["simulate", s(&problem), s(&ctrl), "--steps", "20000", "--seed", "5", "--shards", "3", "--json"];
    let a = bin(&args);
    let b = bin(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(json(&a)["shards"], 3);
}

#[test]
fn rand_then_compare_keeps_sandwich() {
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("p.json");
    let out = bin(&["rand", "--seed", "7", "--dims", "1,1,1,1,1,1", "--target", "0.8", "-o", s(&problem)]);
    assert_eq!(out.status.code(), Some(0));
    let out = bin(&["compare", s(&problem), "--horizon", "200", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["sandwich_ok"], true);
    let central = v["j_central"].as_f64().unwrap();
    let dist = v["j_distributed"].as_f64().unwrap();
    let common = v["j_common_info"].as_f64().unwrap();
    assert!(central <= dist && dist <= common);
    assert!(v["j_oracle"].as_f64().unwrap() > 0.0);
}

#[test]
fn json_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (c1, c2) = (dir.path().join("c1.json"), dir.path().join("c2.json"));
    let problem = data("simple.json");
    let a = bin(&["synth", s(&problem), "-o", s(&c1), "--json"]);
    let b = bin(&["synth", s(&problem), "-o", s(&c2), "--json"]);
    assert_eq!(a.status.code(), Some(0));
    let strip = |o: &Output| {
        let mut v = json(o);
        v.as_object_mut().unwrap().remove("controller");
        v
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
}

#[test]
fn bad_damping_is_a_usage_or_solver_error() {
    let dir = tempfile::tempdir().unwrap();
    let ctrl = dir.path().join("c.json");
    let out = bin(&["synth", s(&data("simple.json")), "-o", s(&ctrl), "--damping", "1.5"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(!ctrl.exists());
}
