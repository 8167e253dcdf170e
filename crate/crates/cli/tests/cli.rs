use std::path::Path;
use std::process::{Command, Output};

fn dpe(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpe"))
        .arg("--workspace")
        .arg(ws)
        .arg("--mock")
        .arg("-q")
        .args(args)
        .env("DPE__DIAGNOSIS__SAMPLE_SIZE", "60")
        .env("DPE__WORLD__POOL_SIZE", "240")
        .env_remove("DPE__RUN__MOCK")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn stage_by_stage() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    ok(&dpe(ws, &["diagnose"]));
    assert!(ws.join("iterations/0/report.json").exists());

    ok(&dpe(ws, &["generate", "--budget", "12", "--mixture", "uniform"]));
    let data = std::fs::read_to_string(ws.join("iterations/0/dataset.jsonl")).unwrap();
    assert_eq!(data.lines().count(), 12);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.join("iterations/0/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["accepted"], 12);
    assert_eq!(manifest["schema_version"], "1.0");

    ok(&dpe(ws, &["filter"]));
    let profiles = std::fs::read_to_string(ws.join("iterations/0/profiles.jsonl")).unwrap();
    let in_band = profiles
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|p| (0.2..=0.8).contains(&p["p"].as_f64().unwrap()))
        .count();
    let kept = std::fs::read_to_string(ws.join("iterations/0/train.jsonl")).unwrap().lines().count();
    assert_eq!(kept, in_band);

    ok(&dpe(ws, &["train"]));
    assert!(ws.join("iterations/0/checkpoint.json").exists());
    assert!(ws.join("iterations/0/metrics.jsonl").exists());

    let div: serde_json::Value = serde_json::from_str(&ok(&dpe(ws, &["diversity"]))).unwrap();
    assert_eq!(div["n"], 12);
    assert!(div["diversity"].as_f64().unwrap() > 0.0);
    let q: serde_json::Value = serde_json::from_str(&ok(&dpe(ws, &["quality"]))).unwrap();
    let qs = q["qs"].as_f64().unwrap();
    assert!((1.0..=5.0).contains(&qs));
    assert!(ws.join("iterations/0/quality.json").exists());
}

#[test]
fn evolve_then_noop_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    let args = ["evolve", "--iterations", "2"];
    let out = ok(&dpe(ws, &args));
    assert!(out.contains("24 summary rows"), "{out}");
    let journal = std::fs::read_to_string(ws.join("journal.jsonl")).unwrap();
    assert_eq!(journal.lines().count(), 8);
    let before = std::fs::read(ws.join("iterations/1/dataset.jsonl")).unwrap();
    ok(&dpe(ws, &args));
    assert_eq!(std::fs::read_to_string(ws.join("journal.jsonl")).unwrap(), journal);
    ok(&dpe(ws, &["--force", "evolve", "--iterations", "2"]));
    assert_eq!(std::fs::read(ws.join("iterations/1/dataset.jsonl")).unwrap(), before);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    // no report yet
    assert_eq!(dpe(ws, &["generate"]).status.code(), Some(3));
    // unreadable config
    assert_eq!(dpe(ws, &["--config", "/nonexistent/dpe.toml", "diagnose"]).status.code(), Some(2));
    let bad = ws.join("bad.toml");
    std::fs::write(&bad, "[generation]\nbudget = 0\n").unwrap();
    assert_eq!(dpe(ws, &["--config", bad.to_str().unwrap(), "diagnose"]).status.code(), Some(2));
    // corrupt report is a schema/invariant failure
    std::fs::create_dir_all(ws.join("iterations/0")).unwrap();
    std::fs::write(ws.join("iterations/0/report.json"), r#"{"schema_version": "9.0"}"#).unwrap();
    assert_eq!(dpe(ws, &["generate"]).status.code(), Some(5));
}

#[test]
fn simulate_writes_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    let out = ok(&dpe(ws, &["simulate", "--iterations", "2", "--budget", "48"]));
    assert!(out.contains("min skill guided"), "{out}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.join("simulate/simulation.json")).unwrap()).unwrap();
    assert_eq!(report["iterations"], 2);
    assert!(report["guided"]["min_skill"].is_number());
    let csv = std::fs::read_to_string(ws.join("simulate/simulation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn config_prints_effective_toml() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&dpe(dir.path(), &["--seed", "11", "config"]));
    let v: toml::Value = out.parse::<toml::Table>().unwrap().into();
    assert_eq!(v["run"]["seed"].as_integer(), Some(11));
    assert_eq!(v["diagnosis"]["sample_size"].as_integer(), Some(60));
}
