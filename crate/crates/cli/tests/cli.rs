use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn scenario(name: &str) -> PathBuf {
    scenarios().join(format!("example1_{name}.toml"))
}

fn multiobs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multiobs"))
        .args(args)
        .env_remove("MULTIOBS_OUT")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {stderr}"))
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Copies a shipped scenario with its gain and certificate files into `dir`.
fn staged_scenario(dir: &Path, name: &str, edit: impl Fn(String) -> String) -> PathBuf {
    for f in ["example1_gains.toml", "example1_certificates.toml"] {
        fs::copy(scenarios().join(f), dir.join(f)).unwrap();
    }
    let text = edit(fs::read_to_string(scenario(name)).unwrap());
    let path = dir.join("scenario.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_all_writes_every_artifact_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let inputs = [
        scenario("isolate_d5"),
        scenarios().join("example1_gains.toml"),
        scenarios().join("example1_certificates.toml"),
    ];
    let before: Vec<Vec<u8>> = inputs.iter().map(|p| fs::read(p).unwrap()).collect();

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = multiobs(&["-q", "run-all", "--scenario", s(&inputs[0]), "--out", s(dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let files = read_dir_bytes(&a);
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    for want in [
        "certificates.toml",
        "validation.csv",
        "trace.csv",
        "detection.csv",
        "isolation.csv",
        "isolation_trace.csv",
        "wbar.csv",
        "summary.csv",
        "thresholds.csv",
    ] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    assert!(!names.iter().any(|n| n.ends_with(".tmp")));
    assert_eq!(files, read_dir_bytes(&b));

    let after: Vec<Vec<u8>> = inputs.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn detect_and_isolate_write_their_own_files() {
    let tmp = tempfile::tempdir().unwrap();
    let det = tmp.path().join("det");
    let iso = tmp.path().join("iso");
    let sc = scenario("detect_c1");
    assert!(multiobs(&["-q", "detect", "--scenario", s(&sc), "--out", s(&det), "--N", "50"]).status.success());
    assert!(multiobs(&["-q", "isolate", "--scenario", s(&sc), "--out", s(&iso)]).status.success());
    assert!(det.join("detection.csv").exists() && !det.join("isolation.csv").exists());
    assert!(iso.join("isolation.csv").exists() && !iso.join("detection.csv").exists());
    let verdicts = fs::read_to_string(det.join("detection.csv")).unwrap();
    assert_eq!(verdicts.lines().count(), 1 + 1000 / 50);
}

#[test]
fn sweep_writes_one_summary_row_per_window() {
    let tmp = tempfile::tempdir().unwrap();
    let out = multiobs(&[
        "-q",
        "sweep",
        "--scenario",
        s(&scenario("detect_c07")),
        "--N",
        "50,100,200",
        "--out",
        s(tmp.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (row, n) in rows.iter().zip([50, 100, 200]) {
        assert!(row.contains(&format!("_N{n}_s1")), "{row}");
    }
    let pooled = fs::read_to_string(tmp.path().join("pooled.csv")).unwrap();
    assert_eq!(pooled.lines().count(), 4);
}

#[test]
fn malformed_matrix_row_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = staged_scenario(tmp.path(), "detect_c07", |t| t.replace("[6.0, 0.9]", "[6.0, 0.9, 1.0]"));
    let out = multiobs(&["detect", "--scenario", s(&sc), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["exit_code"], 2);
    assert!(err["message"].as_str().unwrap().contains("matrices.C[3]"), "{err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn missing_gains_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = staged_scenario(tmp.path(), "detect_c07", |t| t);
    let gains = fs::read_to_string(tmp.path().join("example1_gains.toml")).unwrap();
    let kept: Vec<&str> = gains.split("[[observer]]").take(10).collect();
    fs::write(tmp.path().join("example1_gains.toml"), kept.join("[[observer]]")).unwrap();
    let out = multiobs(&["detect", "--scenario", s(&sc), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("missing gains"), "{msg}");
    assert!(msg.contains('3') && msg.contains('4'), "{msg}");
}

#[test]
fn overrides_are_range_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario("detect_c07");
    for args in [
        ["--tau", "1.5"],
        ["--tau", "0"],
        ["--horizon", "0"],
        ["--N", "0"],
        ["--safety-factor", "0.5"],
    ] {
        let mut all = vec!["detect", "--scenario", s(&sc), "--out", s(tmp.path())];
        all.extend(args);
        let out = multiobs(&all);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(error_json(&out)["exit_code"], 2);
    }
}

#[test]
fn missing_scenario_file_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = multiobs(&["certify", "--scenario", s(&tmp.path().join("nope.toml")), "--out", s(tmp.path())]);
    assert!(!out.status.success());
    let err = error_json(&out);
    assert!(err["error"].is_string());
    assert!(err["message"].as_str().unwrap().contains("nope.toml"));
}
