use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"{
    "dataset": {"kind": "synthetic", "n_classes": 3, "dim": 6, "train_per_class": 40, "test_per_class": 30, "spread": 0.5},
    "model": {"kind": "mlp", "hidden": [10, 8]},
    "partition": {"kind": "dirichlet", "alpha": 1.0},
    "total_clients": 6,
    "rounds": 2,
    "attack": {"kind": "fang_med", "m": 2},
    "defense": {"kind": "DEFENSE"},
    "benign_epochs": 1,
    "lr": 0.01,
    "batch_size": 16,
    "seed": 3
}"#;

fn write_config(dir: &Path, defense: &str) -> PathBuf {
    let path = dir.join(format!("{defense}.json"));
    fs::write(&path, CONFIG.replace("DEFENSE", defense)).unwrap();
    path
}

fn fedcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcc")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_logs_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fedcc");
    let out = dir.path().join("out");
    let o = fedcc(&["run", "--config", s(&cfg), "--out", s(&out), "--seeds", "0,1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "round_log_seed0.csv",
        "round_log_seed1.csv",
        "round_log_seed0.jsonl",
        "summary.json",
        "manifest.json",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(out.join("round_log_seed0.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("round,accuracy,confidence,n_selected,suspects,wall_ms"));
    assert_eq!(lines.count(), 2);
    let jsonl = fs::read_to_string(out.join("round_log_seed1.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    assert!(jsonl.contains("\"scores\""));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"config_hash\"") && manifest.contains("summary.json"));
}

#[test]
fn default_seed_comes_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "coomed");
    let out = dir.path().join("out");
    assert!(fedcc(&["run", "--config", s(&cfg), "--out", s(&out)]).status.success());
    assert!(out.join("round_log_seed3.csv").is_file());
}

#[test]
fn identical_configs_give_identical_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fedcc");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(fedcc(&["run", "--config", s(&cfg), "--out", s(out), "--seeds", "4"]).status.success());
    }
    let sa = fs::read_to_string(a.join("summary.json")).unwrap();
    let sb = fs::read_to_string(b.join("summary.json")).unwrap();
    assert_eq!(sa, sb);
}

#[test]
fn unknown_aggregator_fails_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "geomedian");
    let o = fedcc(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("geomedian"), "{err}");
}

#[test]
fn missing_config_and_bad_flags_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedcc(&["run", "--config", s(&dir.path().join("nope.json")), "--out", s(dir.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));

    let cfg = write_config(dir.path(), "fedavg");
    assert!(!fedcc(&["run", "--config", s(&cfg)]).status.success());
    assert!(!fedcc(&["run", "--config", s(&cfg), "--out", "x", "--seeds", "a,b"]).status.success());
    assert!(!fedcc(&["sweep"]).status.success());
}

#[test]
fn layer_analysis_reports_every_parameter_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fedavg");
    let out = dir.path().join("out");
    let o = fedcc(&["layer-analysis", "--config", s(&cfg), "--out", s(&out), "--seeds", "0,1", "--round", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in [0, 1] {
        let csv = fs::read_to_string(out.join(format!("layer_distance_seed{seed}.csv"))).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,root_distance");
        // three dense layers
        assert_eq!(lines.len(), 4, "{csv}");
    }
}

#[test]
fn metric_ablation_has_one_row_per_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fedavg");
    let out = dir.path().join("out");
    let o = fedcc(&["metric-ablation", "--config", s(&cfg), "--out", s(&out), "--seeds", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("metric_ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6, "{csv}");
    let metrics: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(metrics, ["kernel_cka", "linear_cka", "mmd", "cosine", "euclidean"]);
}
