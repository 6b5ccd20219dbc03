use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_po2q"));
    c.env("RUST_LOG", "warn");
    c
}

/// Fixture files written once by the `fixture` subcommand.
fn fixture_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = bin().args(["fixture", "--out"]).arg(dir.path()).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    })
    .path()
}

fn quantize(out_dir: &Path, extra: &[&str]) -> Output {
    let fx = fixture_dir();
    bin()
        .arg("--model")
        .arg(fx.join("model.json"))
        .arg("--calib")
        .arg(fx.join("calib.bin"))
        .arg("--out")
        .arg(out_dir.join("q.bin"))
        .args(["--iters-weight", "200", "--iters-act", "20"])
        .args(extra)
        .output()
        .unwrap()
}

fn records(path: &PathBuf) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn small_run_writes_model_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let eval = fixture_dir().join("test.bin");
    let out = quantize(dir.path(), &["--eval", eval.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0 mismatches"), "{stdout}");
    assert!(stdout.contains("0 float multiplies"), "{stdout}");
    assert!(dir.path().join("q.bin").exists());

    let recs = records(&dir.path().join("q.jsonl"));
    let kinds: Vec<&str> = recs.iter().map(|r| r["record"].as_str().unwrap()).collect();
    assert_eq!(kinds.first(), Some(&"config"));
    assert_eq!(kinds.iter().filter(|k| **k == "unit").count(), 3);
    assert!(kinds.contains(&"equivalence"));
    let summary = recs.iter().find(|r| r["record"] == "summary").unwrap();
    assert!(summary["accuracy"].as_f64().unwrap() > 0.5);
    assert_eq!(recs[0]["weight_bits"], 4);
}

#[test]
fn baseline_flag_selects_naive_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantize(dir.path(), &["--baseline", "--report", dir.path().join("r.jsonl").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = records(&dir.path().join("r.jsonl"));
    assert!(recs.iter().filter(|r| r["record"] == "unit").all(|r| r["method"] == "naive" && r["p_value"] == 2.0));
}

#[test]
fn missing_required_flag_exits_with_config_code() {
    let out = bin().args(["--model", "m.json", "--out", "q.bin"]).output().unwrap();
    assert_eq!(out.status.code(), Some(10));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--calib"));
}

#[test]
fn bad_bit_width_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantize(dir.path(), &["--wbits", "9"]);
    assert_eq!(out.status.code(), Some(10));
}

#[test]
fn unreadable_model_exits_with_load_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("model.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = bin()
        .arg("--model")
        .arg(&bad)
        .arg("--calib")
        .arg(fixture_dir().join("calib.bin"))
        .arg("--out")
        .arg(dir.path().join("q.bin"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(11));
    assert!(!dir.path().join("q.bin").exists());
}

#[test]
fn ablation_requires_eval_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantize(dir.path(), &["--ablation"]);
    assert_eq!(out.status.code(), Some(10));
}
