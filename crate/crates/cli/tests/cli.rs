use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const FAST: &[&str] = &[
    "--set",
    "scorer.dim=128",
    "--set",
    "inversion.steps=40",
];

fn homodiv(dir: &Path, args: &[&str]) -> Output {
    let data = format!("paths.data_dir={}", dir.join("data").display());
    Command::new(env!("CARGO_BIN_EXE_homodiv"))
        .current_dir(dir)
        .args(args)
        .args(["--set", &data])
        .args(FAST)
        .env_remove("HOMODIV_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON record")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn pipeline_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    ok(&homodiv(dir.path(), &["pipeline", "--prompt", "A chef cooking a meal", "--mock", "--out", "run"]));
    let run = dir.path().join("run");
    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["prompt"], "A chef cooking a meal");
    assert_eq!(manifest["provenance"]["config"]["backend"]["kind"], "mock");
    assert!(manifest["provenance"]["version"].as_str().unwrap().starts_with("0.1.0"));
    let selected = manifest["selected"].as_array().unwrap();
    assert_eq!(selected.len(), 10);
    for s in selected {
        assert!(run.join(s["file"].as_str().unwrap()).is_file());
    }
    let inversion = read_json(&run.join("inversion.json"));
    assert_eq!(inversion["token_ids"].as_array().unwrap().len(), 15);
    assert!(inversion["provenance"].is_object());
    let pool = read_json(&run.join("scored_pool.json"));
    assert_eq!(pool["scored_pool"]["candidates"].as_array().unwrap().len(), 30);
    assert_eq!(std::fs::read_dir(run.join("originals")).unwrap().count(), 10);
    let lines = std::fs::read_to_string(run.join("images.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 10);
}

#[test]
fn base_evaluation_without_noise_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(&homodiv(
        dir.path(),
        &["evaluate", "--condition", "base", "--mock", "--noise", "0", "--out", "rep"],
    ));
    assert_eq!(v["aggregate"], 0.0);
    let csv = std::fs::read_to_string(dir.path().join("rep/report.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("prompt,condition,icad"));
    assert_eq!(csv.lines().count(), 21);
    let report = read_json(&dir.path().join("rep/report.json"));
    assert_eq!(report["report"]["aggregate"], 0.0);
    assert_eq!(report["provenance"]["config"]["backend"]["noise"], 0.0);
}

#[test]
fn compare_hdi_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "compare-hdi", "--strategies", "inversion,identity", "--mock", "--seed", "1", "--sample-count", "4", "--n",
        "4", "--out", "cmp",
    ];
    let first = ok(&homodiv(dir.path(), &args));
    let json1 = std::fs::read(dir.path().join("cmp/comparison.json")).unwrap();
    let csv1 = std::fs::read(dir.path().join("cmp/comparison.csv")).unwrap();
    let second = ok(&homodiv(dir.path(), &args));
    assert_eq!(first, second);
    assert_eq!(json1, std::fs::read(dir.path().join("cmp/comparison.json")).unwrap());
    assert_eq!(csv1, std::fs::read(dir.path().join("cmp/comparison.csv")).unwrap());
    assert_eq!(first["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn stages_chain_through_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = ok(&homodiv(d, &["generate", "--prompt", "A nurse at work", "--n", "6", "--mock", "--out", "gen"]));
    assert_eq!(g["images"], 6);
    let manifest = std::fs::read_to_string(d.join("gen/manifest.jsonl")).unwrap();
    let first: Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    for key in ["content_hash", "prompt", "seed", "backend_id", "guidance_scale", "inference_steps", "created_at"] {
        assert!(first.get(key).is_some(), "manifest lacks {key}");
    }
    let inv = ok(&homodiv(
        d,
        &["invert", "--images", "gen/images", "--prompt", "A nurse at work", "--steps", "30", "--m", "8", "--mock", "--out", "inv.json"],
    ));
    let t1 = inv["inverted_prompt"].as_str().unwrap().to_string();
    assert_eq!(read_json(&d.join("inv.json"))["config"]["m"], 8);
    ok(&homodiv(d, &["expand", "--t0", "A nurse at work", "--t1", &t1, "--k", "12", "--mock", "--out", "pool.json"]));
    let f = ok(&homodiv(
        d,
        &["filter", "--pool", "pool.json", "--original-images", "gen/images", "--lambda", "0.1", "--k", "5", "--mock", "--out", "scored.json"],
    ));
    assert_eq!(f["selected"].as_array().unwrap().len(), 5);
    let scored = read_json(&d.join("scored.json"));
    assert_eq!(scored["scored_pool"]["config"]["select_count"], 5);
    assert_eq!(scored["t1"], t1.as_str());
}

#[test]
fn config_errors_are_listed_in_one_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = homodiv(
        dir.path(),
        &["--set", "filter.lambda=-1", "--set", "nope.key=1", "--set", "eval.n=1", "generate", "--prompt", "x", "--mock"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is one JSON record");
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["details"].as_array().unwrap().len(), 3);
}

#[test]
fn run_failures_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let out = homodiv(dir.path(), &["invert", "--images", "missing", "--prompt", "x", "--mock"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    let out = homodiv(dir.path(), &["evaluate", "--condition", "best", "--mock"]);
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "invalid_input");
    let out = homodiv(dir.path(), &["generate", "--noise", "0.1", "--prompt", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "usage");
}
