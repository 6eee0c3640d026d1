use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SPEC_A: &str = r#"{
  "name": "small-a",
  "seed": 7,
  "layers": [
    {"name": "conv1.weight", "shape": [16, 3, 3, 3], "conv": true, "dist": {"kind": "GAUSSIAN", "mean": 0.01, "std": 0.05}},
    {"name": "conv1.bias", "shape": [16], "dist": {"kind": "GAUSSIAN", "std": 0.01}},
    {"name": "conv2.weight", "shape": [32, 16, 3, 3], "conv": true, "dist": {"kind": "UNIFORM", "low": -0.08, "high": 0.1},
     "channel_shift": {"amplitude": 0.01, "cycles": 2.0, "phase": 0.3}},
    {"name": "fc.weight", "shape": [10, 512], "dist": {"kind": "GAUSSIAN", "mean": -0.02, "std": 0.04}}
  ]
}"#;

const SPEC_B: &str = r#"{
  "name": "small-b",
  "seed": 8,
  "layers": [
    {"name": "c1.weight", "shape": [8, 1, 5, 5], "conv": true, "dist": {"kind": "UNIFORM", "low": -0.2, "high": 0.1}},
    {"name": "c2.weight", "shape": [24, 8, 5, 5], "conv": true, "dist": {"kind": "GAUSSIAN", "mean": 0.03, "std": 0.05}},
    {"name": "c3.weight", "shape": [24, 24, 3, 3], "conv": true, "dist": {"kind": "UNIFORM", "low": -0.05, "high": 0.09}},
    {"name": "fc.weight", "shape": [64, 96], "dist": {"kind": "GAUSSIAN", "mean": 0.0, "std": 0.02}}
  ]
}"#;

fn hoshash(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoshash"))
        .args(args)
        .env_remove("HOSHASH_KEY")
        .output()
        .expect("binary runs")
}

fn with_key(args: &[&str]) -> Output {
    let mut all = args.to_vec();
    all.extend(["--key", "secret", "--blocks", "50"]);
    hoshash(&all)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes both specs and generates their containers.
fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    for (name, spec) in [("a", SPEC_A), ("b", SPEC_B)] {
        let spec_path = dir.path().join(format!("{name}.json"));
        fs::write(&spec_path, spec).unwrap();
        let out = hoshash(&["generate", "--spec", s(&spec_path), "--out-dir", s(dir.path())]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    dir
}

#[test]
fn hash_is_deterministic_and_keyed() {
    let dir = setup();
    let model = dir.path().join("small-a.safetensors");
    let first = with_key(&["hash", s(&model)]);
    let second = with_key(&["hash", s(&model)]);
    assert_eq!(code(&first), 0);
    assert_eq!(stdout(&first), stdout(&second));
    let record: serde_json::Value = serde_json::from_str(stdout(&first).trim()).unwrap();
    assert_eq!(record["T"], 484);
    assert_eq!(record["model_id"], "small-a");

    let other = hoshash(&["hash", s(&model), "--key", "different"]);
    assert_ne!(stdout(&first), stdout(&other));
}

#[test]
fn key_sources() {
    let dir = setup();
    let model = dir.path().join("small-a.safetensors");
    let missing = hoshash(&["hash", s(&model)]);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no key"));

    let flag = hoshash(&["hash", s(&model), "--key", "secret"]);
    let env = Command::new(env!("CARGO_BIN_EXE_hoshash"))
        .args(["hash", s(&model)])
        .env("HOSHASH_KEY", "secret")
        .output()
        .unwrap();
    let key_file = dir.path().join("key.txt");
    fs::write(&key_file, "secret\n").unwrap();
    let file = hoshash(&["hash", s(&model), "--key-file", s(&key_file)]);
    assert_eq!(stdout(&flag), stdout(&env));
    assert_eq!(stdout(&flag), stdout(&file));
}

#[test]
fn verify_exit_codes() {
    let dir = setup();
    let a = dir.path().join("small-a.safetensors");
    let b = dir.path().join("small-b.safetensors");
    let same = with_key(&["verify", s(&a), s(&a)]);
    assert_eq!(code(&same), 0);
    assert!(stdout(&same).contains("SIMILAR"));

    let hash_file = dir.path().join("a.hash");
    assert_eq!(code(&with_key(&["hash", s(&a), "-o", s(&hash_file)])), 0);
    assert_eq!(code(&with_key(&["verify", s(&hash_file), s(&a)])), 0);

    let pruned = dir.path().join("pruned.safetensors");
    assert_eq!(code(&hoshash(&["prune", s(&a), "-o", s(&pruned), "--rate", "0.3"])), 0);
    assert_eq!(code(&with_key(&["verify", s(&a), s(&pruned)])), 0);

    let cross = with_key(&["distance", s(&a), s(&b)]);
    let d: f64 = stdout(&cross).split('\t').next().unwrap().parse().unwrap();
    assert_eq!(code(&cross), if d < 0.32 { 0 } else { 3 });

    let bad = with_key(&["verify", s(&a), s(&dir.path().join("missing.safetensors"))]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn registry_round_trip() {
    let dir = setup();
    let reg = dir.path().join("registry.jsonl");
    let a = dir.path().join("small-a.safetensors");
    let b = dir.path().join("small-b.safetensors");

    let empty = with_key(&["query", s(&a), "--registry", s(&reg)]);
    assert_eq!(code(&empty), 3);

    assert_eq!(code(&with_key(&["register", s(&a), "--registry", s(&reg), "--with-tamper"])), 0);
    assert_eq!(code(&with_key(&["register", s(&b), "--registry", s(&reg)])), 0);
    let dup = with_key(&["register", s(&a), "--registry", s(&reg)]);
    assert_eq!(code(&dup), 1);
    assert!(String::from_utf8_lossy(&dup.stderr).contains("duplicate"));

    let tuned = dir.path().join("tuned.safetensors");
    assert_eq!(code(&hoshash(&["finetune", s(&a), "-o", s(&tuned), "--epsilon", "0.01", "--seed", "3"])), 0);
    let hit = with_key(&["query", s(&tuned), "--registry", s(&reg)]);
    assert_eq!(code(&hit), 0);
    assert!(stdout(&hit).starts_with("small-a\t"));
}

#[test]
fn tamper_and_locate() {
    let dir = setup();
    let a = dir.path().join("small-a.safetensors");
    let t = dir.path().join("tampered.safetensors");
    let out = with_key(&["tamper", s(&a), "-o", s(&t), "--alpha", "0.1", "--seed", "4"]);
    assert_eq!(code(&out), 0);
    let truth = stdout(&out).trim().to_string();
    assert_eq!(truth.split(',').count(), 5);

    let clean = with_key(&["locate", s(&a), s(&a)]);
    assert_eq!(code(&clean), 0);

    let reference = dir.path().join("a.tamper");
    assert_eq!(code(&with_key(&["tamper-hash", s(&a), "-o", s(&reference)])), 0);
    let report = with_key(&["locate", s(&reference), s(&t), "--truth", &truth, "--json"]);
    assert_eq!(code(&report), 3);
    let r: serde_json::Value = serde_json::from_str(stdout(&report).trim()).unwrap();
    assert_eq!(r["eta"], 5);
    assert!(r["r_t"].as_f64().unwrap() >= 0.8);
}

#[test]
fn lyapunov_reports_two_positive_exponents() {
    let out = hoshash(&["lyapunov", "--horizon", "20000"]);
    assert_eq!(code(&out), 0);
    let values: Vec<f64> = stdout(&out)
        .lines()
        .map(|l| l.split('=').nth(1).unwrap().trim().parse().unwrap())
        .collect();
    assert_eq!(values.len(), 2);
    assert!(values.iter().all(|v| *v > 0.0), "{values:?}");
}

#[test]
fn simulate_runs_a_manifest() {
    let dir = TempDir::new().unwrap();
    let manifest = format!(
        r#"{{"models": [{SPEC_A}, {SPEC_B}], "experiments": [
            {{"kind": "discrimination"}},
            {{"kind": "prune", "rates": [0.2]}},
            {{"kind": "finetune", "epsilon": 0.01, "seeds": [1]}},
            {{"kind": "tamper", "alphas": [0.2], "seeds": [0]}}
        ]}}"#
    );
    let path = dir.path().join("manifest.json");
    fs::write(&path, manifest).unwrap();
    let out = with_key(&["simulate", s(&path)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = stdout(&out)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // 1 pair, 2 prune, 2 finetune, 2 tamper.
    assert_eq!(lines.len(), 7);
    let tamper: Vec<_> = lines.iter().filter(|l| l["experiment"] == "tamper").collect();
    assert!(tamper.iter().all(|l| l["eta"] == 10));
}

#[test]
fn rejects_bad_options() {
    let dir = setup();
    let a = dir.path().join("small-a.safetensors");
    assert_eq!(code(&with_key(&["hash", s(&a), "--retain", "0"])), 1);
    assert_eq!(code(&with_key(&["hash", s(&a), "--tau", "1.5"])), 1);
    assert_eq!(code(&hoshash(&["prune", s(&a), "-o", "x", "--rate", "1.0"])), 1);
}
