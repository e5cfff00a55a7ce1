use std::path::Path;
use std::process::{Command, Output};

fn roft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roft"))
        .current_dir(dir)
        .args(args)
        .env("ROFT_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, size: &str, out: &str) {
    let o = roft(dir, &["gen-data", "--size", size, "--seed", "3", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn pretrained(dir: &Path, paradigm: &str) {
    gen(dir, "80", "d");
    std::fs::write(
        dir.join("pre.json"),
        format!(r#"{{"dataset": "d/dataset.jsonl", "encoder": {{"hidden": 8, "layers": 2}}, "pretrain": {{"paradigm": "{paradigm}", "epochs": 3}}}}"#),
    )
    .unwrap();
    let o = roft(dir, &["pretrain", "--config", "pre.json", "--out", "p"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn finetune(dir: &Path, strategy: &str, out: &str) -> Output {
    let cfg = format!(
        r#"{{"checkpoint": "p/checkpoint.ckpt", "dataset": "d/dataset.jsonl", "split": "random", "strategy": {strategy}}}"#
    );
    std::fs::write(dir.join("ft.json"), cfg).unwrap();
    roft(dir, &["finetune", "--config", "ft.json", "--out", out])
}

#[test]
fn gen_data_is_byte_identical_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "10", "a");
    gen(dir.path(), "10", "b");
    let a = std::fs::read(dir.path().join("a/dataset.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/dataset.jsonl")).unwrap());
    let ds = roft_core::data::load_dataset(dir.path().join("a/dataset.jsonl")).unwrap();
    assert_eq!(ds.len(), 10);
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 10);
}

#[test]
fn ssl_pretraining_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    pretrained(dir.path(), "ssl");
    let ck = roft_core::model::Checkpoint::load(dir.path().join("p/checkpoint.ckpt")).unwrap();
    assert_eq!(ck.pretraining, "ssl");
    let log = std::fs::read_to_string(dir.path().join("p/pretrain_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn supervised_checkpoint_is_tagged() {
    let dir = tempfile::tempdir().unwrap();
    pretrained(dir.path(), "supervised");
    let ck = roft_core::model::Checkpoint::load(dir.path().join("p/checkpoint.ckpt")).unwrap();
    assert_eq!(ck.pretraining, "supervised");
}

#[test]
fn missing_dataset_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pre.json"), r#"{"dataset": "nowhere.jsonl"}"#).unwrap();
    let o = roft(dir.path(), &["pretrain", "--config", "pre.json", "--out", "p"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.jsonl"));
    assert!(!dir.path().join("p").exists());
}

#[test]
fn missing_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = roft(dir.path(), &["bench", "--config", "absent.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn wise_writes_an_interpolated_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    pretrained(dir.path(), "ssl");
    let o = finetune(dir.path(), r#"{"kind": "wise", "alpha": 0.5, "epochs": 2}"#, "w");
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = roft_core::model::Checkpoint::load(dir.path().join("w/interpolated.ckpt")).unwrap();
    assert!(ck.params.head.is_some());
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("w/result.json")).unwrap()).unwrap();
    assert_eq!(result["alphas"], serde_json::json!([0.5, 0.5]));
}

#[test]
fn dwise_writes_alphas() {
    let dir = tempfile::tempdir().unwrap();
    pretrained(dir.path(), "ssl");
    let o = finetune(dir.path(), r#"{"kind": "dwise", "epochs": 2, "alpha_epochs": 5}"#, "dw");
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("dw/alphas.json")).unwrap()).unwrap();
    let alphas = doc["alphas"].as_array().unwrap();
    assert_eq!(alphas.len(), 2);
    assert!(alphas.iter().all(|a| (0.0..=1.0).contains(&a.as_f64().unwrap())));
    assert_eq!(doc["trace"].as_array().unwrap().len(), 6);
}

#[test]
fn unknown_kind_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    pretrained(dir.path(), "ssl");
    let o = finetune(dir.path(), r#"{"kind": "wiseft"}"#, "x");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`kind`"), "{}", stderr(&o));
}

#[test]
fn finetune_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    pretrained(dir.path(), "ssl");
    let strategy = r#"{"kind": "l2sp", "epochs": 2}"#;
    assert!(finetune(dir.path(), strategy, "r1").status.success());
    assert!(finetune(dir.path(), strategy, "r2").status.success());
    for f in ["finetuned.ckpt", "finetune_log.jsonl", "result.json"] {
        let a = std::fs::read(dir.path().join("r1").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("r2").join(f)).unwrap(), "{f}");
    }
}

fn bench_config(dir: &Path, second_dataset: &str) {
    let cfg = format!(
        r#"{{
  "checkpoints": {{"ssl": "p/checkpoint.ckpt"}},
  "datasets": [{{"name": "a", "path": "d/dataset.jsonl"}}, {{"name": "b", "path": "{second_dataset}"}}],
  "strategies": [
    {{"label": "full", "config": {{"kind": "full", "epochs": 2}}}},
    {{"label": "lp", "config": {{"kind": "lp", "epochs": 2}}}}
  ],
  "splits": ["random"],
  "seeds": [0, 1]
}}"#
    );
    std::fs::write(dir.join("bench.json"), cfg).unwrap();
}

#[test]
fn bench_emits_reports_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    pretrained(dir.path(), "ssl");
    gen(dir.path(), "60", "e");
    bench_config(dir.path(), "e/dataset.jsonl");
    for out in ["b1", "b2"] {
        let o = roft(dir.path(), &["bench", "--config", "bench.json", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let csv = std::fs::read_to_string(dir.path().join("b1/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    assert_eq!(csv, std::fs::read_to_string(dir.path().join("b2/bench.csv")).unwrap());
    let md = std::fs::read_to_string(dir.path().join("b1/bench.md")).unwrap();
    assert!(md.contains("| full") && md.contains("| lp"));
}

#[test]
fn failed_cells_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    pretrained(dir.path(), "ssl");
    // a dataset with different feature width cannot feed the checkpoint
    let o = roft(dir.path(), &["gen-data", "--size", "40", "--config", "wide.json", "--out", "w"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(dir.path().join("wide.json"), r#"{"feature_dim": 5}"#).unwrap();
    let o = roft(dir.path(), &["gen-data", "--size", "40", "--config", "wide.json", "--out", "w"]);
    assert!(o.status.success(), "{}", stderr(&o));
    bench_config(dir.path(), "w/dataset.jsonl");
    let o = roft(dir.path(), &["bench", "--config", "bench.json", "--out", "b"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = std::fs::read_to_string(dir.path().join("b/bench.md")).unwrap();
    assert!(md.contains("Failed cells"), "{md}");
    assert!(stderr(&o).contains("cell failed"));
}

#[test]
fn prop1_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = roft(dir.path(), &["verify", "prop1", "--dim", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 5);
    for r in rows {
        assert_eq!(r["dim"], 8);
        assert!(r["error"].as_f64().unwrap() < 1e-6);
        assert!(r.get("seed").is_some() && r.get("delta").is_some());
    }
}

#[test]
fn gradcheck_penalties_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = roft(dir.path(), &["verify", "gradcheck", "--checks", "penalties"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn injected_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = roft(dir.path(), &["verify", "gradcheck", "--configs", "2", "--inject-failure"]);
    assert_eq!(o.status.code(), Some(1));
}
