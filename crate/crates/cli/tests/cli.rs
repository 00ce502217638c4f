use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_dpbilevel");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).env_remove("DPBILEVEL_OUT_DIR").output().expect("spawn dpbilevel")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small quadratic run that finishes in about a second.
const QUICK: &str = r#"{"kind": "bilevel_full",
    "problem": {"family": "quadratic", "generator": {"n": 8000}},
    "run": {"outer": {"t_cap": 3}, "inner": {"t_cap": 5}}}"#;

#[test]
fn print_defaults_is_valid_json() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["bilevel-full", "reg-tuning", "scaling-sweep"] {
        let out = run(&["--print-defaults", "--kind", kind], dir.path());
        assert!(out.status.success());
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(v["kind"], kind.replace('-', "_"));
    }
}

#[test]
fn leak_demo_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "leak.json",
        r#"{"kind": "leak_demo", "problem": {"family": "mean_leak", "data": {"source": "inline", "records": [[1.0, 0.0], [3.0, 0.0]]}}}"#,
    );
    let out = run(&["run", "leak.json", "--out-dir", "out"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let leak = read_json(&dir.path().join("out/leak.json"));
    assert!(leak.is_object());
    assert!(dir.path().join("out/config.resolved.json").exists());
}

#[test]
fn bilevel_run_writes_report_ledger_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "q.json", QUICK);
    let out = run(&["run", "q.json", "--out-dir", "out"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    for f in ["run_report.json", "ledger.json", "trajectory.csv"] {
        assert!(dir.path().join("out").join(f).exists(), "missing {f}");
    }
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "q.json", QUICK);
    for o in ["a", "b"] {
        assert!(run(&["run", "q.json", "--seed", "4", "--out-dir", o], dir.path()).status.success());
    }
    let strip = |o: &str| {
        let mut v = read_json(&dir.path().join(o).join("run_report.json"));
        v.as_object_mut().unwrap().remove("timing");
        v
    };
    assert_eq!(strip("a"), strip("b"));
    let read = |o: &str, f: &str| std::fs::read(dir.path().join(o).join(f)).unwrap();
    assert_eq!(read("a", "ledger.json"), read("b", "ledger.json"));
    assert_eq!(read("a", "trajectory.csv"), read("b", "trajectory.csv"));
}

#[test]
fn missing_dataset_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "m.json",
        r#"{"kind": "bilevel_full", "problem": {"family": "mean_leak", "data": {"source": "csv", "path": "nowhere.csv"}}, "out_dir": "out"}"#,
    );
    let out = run(&["run", "m.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = read_json(&dir.path().join("out/error.json"));
    assert_eq!(err["error"]["exit_code"], 2);
    assert!(err["error"]["message"].as_str().unwrap().contains("nowhere.csv"));
}

#[test]
fn unknown_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "u.json", r#"{"kind": "leak_demo", "bogus": 1}"#);
    let out = run(&["run", "u.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["error"]["kind"], "invalid_config");
}

#[test]
fn overspending_split_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "p.json",
        r#"{"kind": "bilevel_full",
            "problem": {"family": "quadratic", "generator": {"n": 8000}},
            "run": {"outer": {"budget_split": "printed", "t_cap": 3}, "inner": {"t_cap": 5}},
            "out_dir": "out"}"#,
    );
    let out = run(&["run", "p.json"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = read_json(&dir.path().join("out/error.json"));
    assert_eq!(err["error"]["kind"], "budget_exceeded");
}

#[test]
fn non_finite_data_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.csv", "1.0,0.0\nNaN,2.0\n");
    write(
        dir.path(),
        "n.json",
        r#"{"kind": "bilevel_full", "problem": {"family": "mean_leak", "data": {"source": "csv", "path": "bad.csv"}}, "out_dir": "out"}"#,
    );
    let out = run(&["run", "n.json"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    let err = read_json(&dir.path().join("out/error.json"));
    assert_eq!(err["error"]["kind"], "numerical");
}

#[test]
fn verify_passes_and_catches_halved_constant() {
    let dir = tempfile::tempdir().unwrap();
    let clean = run(&["verify"], dir.path());
    assert!(clean.status.success(), "{}", String::from_utf8_lossy(&clean.stdout));

    let faulty = run(&["verify", "--fault", "halve-l0f", "--json"], dir.path());
    assert!(!faulty.status.success());
    let v: Value = serde_json::from_slice(&faulty.stdout).unwrap();
    let text = v.to_string();
    assert!(text.contains("L0f"), "{text}");
}
