//! End-to-end checks of the command-line tool.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regime-smp"))
}

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn report(dir: &std::path::Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn selftest_exits_zero() {
    let out = tempfile::tempdir().unwrap();
    let st = bin()
        .args(["selftest", "--out"])
        .arg(out.path())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let r = report(out.path());
    assert_eq!(r["passed"], true);
    assert_eq!(r["manifest_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn malformed_config_exits_two_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = std::fs::read_to_string(scenarios().join("lq-demo.json"))
        .unwrap()
        .replace("\"steps\": 160", "\"steps\": \"many\"");
    std::fs::write(&path, text).unwrap();
    let out = bin()
        .args(["simulate", "--scenario"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`steps`") && err.contains("line 4"), "{err}");
}

#[test]
fn missing_scenario_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let st = bin()
        .args([
            "verify-mp",
            "--scenario",
            "/nonexistent/scenario.json",
            "--out",
        ])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn negative_control_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let st = bin()
        .args(["verify-mp", "--scenario"])
        .arg(scenarios().join("lq-negative.json"))
        .args([
            "--particles",
            "2000",
            "--steps",
            "40",
            "--workers",
            "2",
            "--out",
        ])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));
    let r = report(dir.path());
    assert!(
        r["results"]["violation_fraction"].as_f64().unwrap() > 0.1,
        "{r}"
    );
    assert_eq!(r["results"]["verdict"], "fail");
    assert_eq!(r["manifest"]["scenario"]["particles"], 2000);
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("out");
    let files = [
        "report.json",
        "paths_s0.csv",
        "ensemble_s1.csv",
        "cost_s0.csv",
    ];
    let run = || {
        let st = bin()
            .args(["simulate", "--scenario"])
            .arg(scenarios().join("lq-demo.json"))
            .args([
                "--particles",
                "300",
                "--steps",
                "80",
                "--dump-paths",
                "--out",
            ])
            .arg(&o)
            .status()
            .unwrap();
        assert_eq!(st.code(), Some(0));
        files.map(|f| std::fs::read(o.join(f)).unwrap())
    };
    assert_eq!(run(), run());
}
