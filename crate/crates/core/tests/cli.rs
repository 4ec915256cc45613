use std::process::{Command, Output};

fn pfo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfo"))
        .args(args)
        .output()
        .unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn verify_reports_split_counterexample() {
    let o = pfo(&["--json", "verify", "split_toy", "--exhaustive", "3"]);
    assert_eq!(o.status.code(), Some(1));
    let v = json(&o);
    assert_eq!(v["oblivious"], false);
    assert_eq!(v["counterexample"]["first_divergence"], 1);
}

#[test]
fn transformed_split_is_oblivious() {
    let o = pfo(&[
        "verify",
        "split_toy",
        "--exhaustive",
        "3",
        "--transformed",
        "--opt",
        "all",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn simulate_prints_outputs() {
    let o = pfo(&["--json", "simulate", "split_toy", "--input", "s=5"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&o)["outputs"]["y"][0], 9);
}

#[test]
fn transform_writes_program_and_plan() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.pfo");
    let o = pfo(&[
        "--out",
        out.to_str().unwrap(),
        "transform",
        "aes_toy",
        "--opt",
        "O1,O2",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(out.exists());
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("toy.plan.json")).unwrap())
            .unwrap();
    assert_eq!(
        plan["counters"]["data_fetch"].as_u64().unwrap()
            + plan["counters"]["copy_back"].as_u64().unwrap(),
        2
    );
}

#[test]
fn corpus_report_as_json() {
    let o = pfo(&[
        "corpus",
        "defenses",
        "--cases",
        "split_toy,aes_toy",
        "--samples",
        "20",
        "--format",
        "json",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let v = json(&o);
    assert_eq!(v["defenses"].as_array().unwrap().len(), 2);
    assert!(v["failures"].as_array().unwrap().is_empty());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(pfo(&["corpus"]).status.code(), Some(2));
    assert_eq!(pfo(&["parse", "/nonexistent/x.pfo"]).status.code(), Some(2));
    assert_eq!(pfo(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn syntax_error_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.pfo");
    std::fs::write(&f, "void main( {").unwrap();
    let o = pfo(&["parse", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}
