use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dpme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpme")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_power(dir: &Path, name: &str, seed: u64, scenarios: usize) -> PathBuf {
    let out = path(dir, name);
    let o = dpme(&["gen", "--scenarios", &scenarios.to_string(), "--seed", &seed.to_string(), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn gen_reports_published_size_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = path(dir.path(), "a.json");
    let b = path(dir.path(), "b.json");
    let o = dpme(&["gen", "--scenarios", "1000", "--seed", "4", "--out", s(&a)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("93022 rows, 40010 cols"), "{}", stdout(&o));
    dpme(&["gen", "--scenarios", "1000", "--seed", "4", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn gen_rejects_an_empty_budget() {
    let dir = tempfile::tempdir().unwrap();
    let o = dpme(&["gen", "--beta", "0", "--out", s(&path(dir.path(), "x.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!path(dir.path(), "x.json").exists());
}

#[test]
fn toy_solve_reaches_the_corner() {
    let dir = tempfile::tempdir().unwrap();
    let inst = path(dir.path(), "toy.json");
    assert!(dpme(&["gen", "--kind", "toy", "--out", s(&inst)]).status.success());
    let (report, trace) = (path(dir.path(), "r.json"), path(dir.path(), "t.csv"));
    let o = dpme(&["solve", "--instance", s(&inst), "--report", s(&report), "--trace", s(&trace)]);
    assert_eq!(o.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!((doc["x_final"][0].as_f64().unwrap() - 1.0).abs() <= 1e-6);
    assert!((doc["objective"].as_f64().unwrap() + 1.0).abs() <= 1e-6);
}

#[test]
fn iteration_cap_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let inst = gen_power(dir.path(), "i.json", 1, 10);
    let (report, trace) = (path(dir.path(), "r.json"), path(dir.path(), "t.csv"));
    let o = dpme(&["solve", "--instance", s(&inst), "--max-outer", "1", "--report", s(&report), "--trace", s(&trace)]);
    assert_eq!(o.status.code(), Some(3));
    let o = dpme(&["solve", "--instance", s(&inst), "--max-inner", "1", "--report", s(&report), "--trace", s(&trace)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn traces_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let inst = gen_power(dir.path(), "i.json", 2, 30);
    let report = path(dir.path(), "r.json");
    let trace = path(dir.path(), "t.csv");
    let mut runs = vec![];
    for _ in 0..2 {
        let o = dpme(&["solve", "--instance", s(&inst), "--report", s(&report), "--trace", s(&trace)]);
        assert!(o.status.success());
        runs.push((std::fs::read(&trace).unwrap(), std::fs::read(&report).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let text = String::from_utf8(runs[0].0.clone()).unwrap();
    assert!(text.lines().any(|l| l.starts_with("# instance_digest: ")));
    assert!(text.lines().any(|l| l.starts_with("outer,inner_iters,S_nu")));
}

#[test]
fn verify_accepts_solutions_and_names_violated_rows() {
    let dir = tempfile::tempdir().unwrap();
    let inst = gen_power(dir.path(), "i.json", 1, 20);
    let (report, trace) = (path(dir.path(), "r.json"), path(dir.path(), "t.csv"));
    assert!(dpme(&["solve", "--instance", s(&inst), "--report", s(&report), "--trace", s(&trace)]).status.success());
    let o = dpme(&["verify", "--instance", s(&inst), "--solution", s(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let checked: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let solved: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(checked["kkt"], solved["kkt"]);

    // pull capacity 0 below every shipment from plant 0
    let mut doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    doc["x_final"][0] = serde_json::json!(1.0);
    let bad = path(dir.path(), "bad.json");
    std::fs::write(&bad, serde_json::to_vec(&doc).unwrap()).unwrap();
    let o = dpme(&["verify", "--instance", s(&inst), "--solution", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("x.lower[0]") || err.contains(".joint[0]"), "{err}");

    let o = dpme(&["verify", "--instance", s(&inst), "--solution", s(&report), "--tol-abs", "0", "--tol-rel", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_reports_the_solver_residual_even_when_it_fails() {
    // the objective test can stop short of a stationary point; verify then
    // reports the same residual the solver recorded
    let dir = tempfile::tempdir().unwrap();
    let inst = gen_power(dir.path(), "i.json", 3, 20);
    let (report, trace) = (path(dir.path(), "r.json"), path(dir.path(), "t.csv"));
    assert!(dpme(&["solve", "--instance", s(&inst), "--report", s(&report), "--trace", s(&trace)]).status.success());
    let o = dpme(&["verify", "--instance", s(&inst), "--solution", s(&report)]);
    let checked: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let solved: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(checked["kkt"], solved["kkt"]);
    let pass = checked["pass"].as_bool().unwrap();
    assert_eq!(o.status.code(), Some(if pass { 0 } else { 2 }));
}

#[test]
fn constant_schedule_over_the_pool_matches_solve() {
    let dir = tempfile::tempdir().unwrap();
    let inst = gen_power(dir.path(), "i.json", 5, 15);
    let (r1, t1, r2, t2) = (
        path(dir.path(), "r1.json"),
        path(dir.path(), "t1.csv"),
        path(dir.path(), "r2.json"),
        path(dir.path(), "t2.csv"),
    );
    assert!(dpme(&["solve", "--instance", s(&inst), "--report", s(&r1), "--trace", s(&t1)]).status.success());
    let o = dpme(&[
        "solve-sampled",
        "--instance",
        s(&inst),
        "--schedule",
        "constant:15",
        "--report",
        s(&r2),
        "--trace",
        s(&t2),
    ]);
    assert!(o.status.success());
    let rows = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p).unwrap().lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
    };
    assert_eq!(rows(&t1), rows(&t2));
}

#[test]
fn continuous_sampling_is_marked_heuristic() {
    let dir = tempfile::tempdir().unwrap();
    let (report, trace) = (path(dir.path(), "r.json"), path(dir.path(), "t.csv"));
    let o = dpme(&[
        "solve-sampled",
        "--continuous",
        "--eta",
        "5",
        "--max-outer",
        "3",
        "--report",
        s(&report),
        "--trace",
        s(&trace),
    ]);
    assert!(matches!(o.status.code(), Some(0) | Some(3)));
    assert!(stdout(&o).contains("heuristic"));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(doc["heuristic"], serde_json::json!(true));
}

#[test]
fn slice_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let inst = path(dir.path(), "toy.json");
    assert!(dpme(&["gen", "--kind", "toy", "--out", s(&inst)]).status.success());
    let out = path(dir.path(), "slice.csv");
    let o = dpme(&["slice", "--instance", s(&inst), "--axis", "0:0:1:11", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(data.len(), 11);
    assert!(dpme(&["slice", "--instance", s(&inst), "--axis", "3:0:1:11", "--out", s(&out)]).status.code() == Some(1));
}

#[test]
fn missing_instance_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dpme(&[
        "solve",
        "--instance",
        s(&path(dir.path(), "nope.json")),
        "--report",
        s(&path(dir.path(), "r.json")),
        "--trace",
        s(&path(dir.path(), "t.csv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
