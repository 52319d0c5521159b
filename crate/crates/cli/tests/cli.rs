use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn emoflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emoflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--set",
    "corpus_spec.pairs_per_stratum=10",
    "--set",
    "steps=30",
    "--set",
    "model.hidden=8",
    "--set",
    "eval_pairs=2",
    "--seed",
    "7",
];

#[test]
fn gen_data_inventory_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = emoflow(&["gen-data", "--seed", "3", "--set", "pairs_per_stratum=4", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(a.join("corpus.json").exists());
    assert!(a.join("ground_truth.tnsr").exists());
    let samples = fs::read_dir(a.join("samples")).unwrap().count();
    assert_eq!(samples, 4 * 4 * 4 * 2);
    let (ma, mb) = (json(&a.join("manifest.json")), json(&b.join("manifest.json")));
    assert_eq!(ma["corpus_hash"], mb["corpus_hash"]);
    assert_eq!(ma["command"], "gen-data");
    assert_eq!(ma["seed"], 3);
    assert!(ma["error"].is_null());
}

#[test]
fn invalid_spec_exits_two_and_names_fields() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"feature_dim": 8, "embed_dim": 12}"#).unwrap();
    let out = dir.path().join("out");
    let o = emoflow(&["gen-data", "--spec", p(&spec), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("feature_dim") && err.contains("embed_dim"), "{err}");
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["error"]["exit_code"], 2);
}

#[test]
fn json_errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let o = emoflow(&["--json-errors", "train", "--set", "batch_size=1", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "config");
    assert!(v["error"]["message"].as_str().unwrap().contains("batch_size"));
}

#[test]
fn divergence_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["--json-errors", "train", "--set", "lr=1e300", "--out", p(dir.path())];
    args.extend(SMALL);
    let o = emoflow(&args);
    assert_eq!(o.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "divergence");
}

#[test]
fn train_rerun_is_identical_and_eval_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, e) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("e"));
    for out in [&a, &b] {
        let mut args = vec!["train", "--variant", "v2", "--out", p(out)];
        args.extend(SMALL);
        let o = emoflow(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["report.json", "train_log.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,loss_total,loss_cfm,loss_orth,loss_contrast,grad_norm");
    assert_eq!(log.lines().count(), 31);

    let mut args = vec!["eval", "--model", p(&a), "--set", "variant=v2", "--out", p(&e)];
    args.extend(SMALL);
    let o = emoflow(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&a.join("report.json")), json(&e.join("report.json")));
}

#[test]
fn ablate_writes_four_rows_with_one_hash() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--out", p(dir.path())];
    args.extend(SMALL);
    let o = emoflow(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let variants: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(variants, ["v1", "v2", "v3", "v4"]);
    assert!(rows.iter().all(|r| r[1] == "ok" && r[10] == rows[0][10]));
}

#[test]
fn extract_emotion_matches_oracle_on_noiseless_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let o = emoflow(&[
        "extract-emotion",
        "--n",
        "10",
        "--emotion",
        "2",
        "--set",
        "noise_sigma=0",
        "--out",
        p(dir.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let side = json(&dir.path().join("emotion_2.json"));
    assert_eq!(side["emotion_id"], 2);
    assert_eq!(side["n"], 10);
    assert_eq!(side["pair_ids"].as_array().unwrap().len(), 10);
    assert!(side["oracle_cosine"].as_f64().unwrap() >= 0.99);
    let bytes = fs::read(dir.path().join("emotion_2.tnsr")).unwrap();
    assert_eq!(&bytes[..4], b"TNSR");

    let bad = emoflow(&["extract-emotion", "--emotion", "0", "--out", p(&dir.path().join("bad"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn grad_check_prints_all_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = emoflow(&["grad-check", "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 18);
    assert!(rows.iter().all(|r| r.ends_with("PASS")), "{table}");
    assert!(dir.path().join("gradcheck.json").exists());
}
