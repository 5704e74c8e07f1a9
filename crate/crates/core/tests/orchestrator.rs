use fedcc::aggregators::Defense;
use fedcc::config::{AttackSpec, ExperimentConfig};
use fedcc::nn::init_model;
use fedcc::orchestrator::{read_round_csv, run_experiment, write_round_csv, ExperimentData, RoundRow, Simulation, Summary};
use fedcc::rng::{derive_seed, purpose};
use fedcc::train::{local_train, TrainConfig};
use fedcc::Error;
use std::path::Path;

fn synthetic_json(extra: &str) -> String {
    let mut base = serde_json::json!({
        "dataset": {"kind": "synthetic", "n_classes": 4, "dim": 8, "train_per_class": 100, "test_per_class": 100, "spread": 0.6},
        "model": {"kind": "mlp", "hidden": [16, 12]},
        "partition": {"kind": "iid"},
        "total_clients": 10,
        "rounds": 3,
        "defense": {"kind": "fedavg"},
        "benign_epochs": 1,
        "malicious_epochs": 2,
        "lr": 0.01,
        "batch_size": 16
    });
    let overrides: serde_json::Value = serde_json::from_str(&format!("{{{}}}", extra.trim_start_matches(','))).unwrap();
    for (k, v) in overrides.as_object().unwrap() {
        base[k] = v.clone();
    }
    base.to_string()
}

fn config(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&synthetic_json(extra)).unwrap()
}

fn data(cfg: &ExperimentConfig) -> ExperimentData {
    ExperimentData::load(cfg, Path::new(".")).unwrap()
}

#[test]
fn single_client_fedavg_is_plain_local_training() {
    let cfg = config(r#", "total_clients": 1, "rounds": 2"#);
    let d = data(&cfg);
    let mut sim = Simulation::new(&cfg, d.clone(), 5).unwrap();
    let arch = sim.architecture().clone();
    let all: Vec<usize> = (0..d.train.len()).collect();
    assert_eq!(sim.partition().clients[0].len(), all.len());

    let tc = TrainConfig {
        epochs: 1,
        batch_size: 16,
        lr: 0.01,
    };
    let mut expected = init_model(&arch, 5);
    for round in 1..=2u64 {
        sim.step().unwrap();
        let seed = derive_seed(5, &[purpose::TRAIN, 0, round]);
        expected = local_train(&arch, &expected, &d.train, &sim.partition().clients[0], &tc, seed, None).unwrap();
        assert_eq!(sim.global(), &expected, "round {round}");
    }
}

#[test]
fn fedcc_matches_fedavg_without_attack_on_iid_data() {
    let base = config(r#", "rounds": 20"#);
    let d = data(&base);
    let mut cc = base.clone();
    cc.defense = Defense::Fedcc;
    let avg = run_experiment(&base, &d, 0).unwrap();
    let ccr = run_experiment(&cc, &d, 0).unwrap();
    let gap = (avg.final_accuracy() - ccr.final_accuracy()).abs();
    for l in &ccr.logs {
        if !l.suspects.is_empty() {
            eprintln!("round {}: benign split, suspects {:?}", l.round, l.suspects);
        }
    }
    assert!(avg.final_accuracy() > 50.0, "{}", avg.final_accuracy());
    assert!(gap < 3.0, "fedavg {} fedcc {}", avg.final_accuracy(), ccr.final_accuracy());
}

#[test]
fn fang_med_round_contains_every_crafted_update() {
    let cfg = config(r#", "attack": {"kind": "fang_med", "m": 3}"#);
    let mut sim = Simulation::new(&cfg, data(&cfg), 1).unwrap();
    let out = sim.step().unwrap();
    assert_eq!(out.updates.len(), 10);
    assert_eq!(out.log.malicious, vec![0, 1, 2]);
    let flagged: Vec<usize> = out.updates.iter().filter(|u| u.is_malicious_truth).map(|u| u.client_id).collect();
    assert_eq!(flagged, vec![0, 1, 2]);
    let ids: Vec<usize> = out.updates.iter().map(|u| u.client_id).collect();
    assert_eq!(ids, (0..10).collect::<Vec<_>>());
    // fedavg keeps everyone
    assert_eq!(out.log.selected, ids);
    assert!(out.log.suspects.is_empty());
}

#[test]
fn same_seed_reproduces_every_logged_scalar() {
    for extra in [
        r#", "defense": {"kind": "fedcc"}, "attack": {"kind": "fang_med", "m": 3}"#,
        r#", "defense": {"kind": "krum"}, "attack": {"kind": "fang_krum", "m": 2}"#,
        r#", "defense": {"kind": "fedavg"}, "attack": {"kind": "targeted_backdoor", "m": 1, "source_class": 0, "target_label": 1}"#,
    ] {
        let cfg = config(extra);
        let d = data(&cfg);
        let a = run_experiment(&cfg, &d, 9).unwrap();
        let b = run_experiment(&cfg, &d, 9).unwrap();
        for (x, y) in a.logs.iter().zip(&b.logs) {
            assert!(x.same_outcome(y, 1e-6), "{extra}: {x:?} vs {y:?}");
        }
        let c = run_experiment(&cfg, &d, 10).unwrap();
        assert!(a.logs.iter().zip(&c.logs).any(|(x, y)| !x.same_outcome(y, 1e-12)));
    }
}

#[test]
fn summary_averages_per_seed_finals() {
    let cfg = config("");
    let d = data(&cfg);
    let runs: Vec<_> = [0, 1, 2].iter().map(|&s| run_experiment(&cfg, &d, s).unwrap()).collect();
    let s = Summary::new(&cfg, &runs);
    let finals: Vec<f64> = runs.iter().map(|r| r.logs.last().unwrap().accuracy).collect();
    assert_eq!(s.final_accuracy, finals);
    assert!((s.mean_final_accuracy - finals.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert_eq!(s.mean_final_confidence, None);
    assert_eq!(s.seeds, vec![0, 1, 2]);
}

#[test]
fn parameter_count_is_constant_across_rounds() {
    let cfg = config(r#", "rounds": 4, "defense": {"kind": "bulyan"}, "attack": {"kind": "fang_med", "m": 1}"#);
    let mut sim = Simulation::new(&cfg, data(&cfg), 3).unwrap();
    let n = sim.global().n_params();
    for _ in 0..4 {
        sim.step().unwrap();
        assert_eq!(sim.global().n_params(), n);
        assert!(sim.global().same_layout(&init_model(sim.architecture(), 0)));
    }
}

#[test]
fn fedcc_output_is_unweighted_mean_of_selected() {
    let cfg = config(r#", "defense": {"kind": "fedcc"}, "partition": {"kind": "dirichlet", "alpha": 0.5}"#);
    let mut sim = Simulation::new(&cfg, data(&cfg), 4).unwrap();
    for _ in 0..3 {
        let out = sim.step().unwrap();
        let chosen: Vec<_> = out.updates.iter().filter(|u| out.log.selected.contains(&u.client_id)).collect();
        let flat: Vec<Vec<f32>> = chosen.iter().map(|u| u.params.to_flat()).collect();
        let got = sim.global().to_flat();
        for (j, g) in got.iter().enumerate() {
            let mean = flat.iter().map(|f| f[j] as f64).sum::<f64>() / flat.len() as f64;
            assert!((*g as f64 - mean).abs() < 1e-6, "coordinate {j}");
        }
        if out.log.suspects.is_empty() {
            assert_eq!(chosen.len(), 10);
        }
    }
}

#[test]
fn config_errors_name_the_field_and_value() {
    let e = ExperimentConfig::from_json(&synthetic_json(r#", "defense": {"kind": "median_of_means"}"#)).unwrap_err();
    let msg = e.to_string();
    assert!(matches!(e, Error::Config(_)));
    assert!(msg.contains("defense") && msg.contains("median_of_means"), "{msg}");

    let msg = ExperimentConfig::from_json(&synthetic_json(r#", "fraction": 1.5"#)).unwrap_err().to_string();
    assert!(msg.contains("fraction") && msg.contains("1.5"), "{msg}");

    let msg = ExperimentConfig::from_json(&synthetic_json(r#", "colour": "red""#)).unwrap_err().to_string();
    assert!(msg.contains("colour"), "{msg}");

    let msg = ExperimentConfig::from_json(&synthetic_json(r#", "attack": {"kind": "fang_med", "m": 5}"#)).unwrap_err().to_string();
    assert!(msg.contains("attack.m") && msg.contains('5'), "{msg}");

    // minority is judged against the clients of one round
    let msg = ExperimentConfig::from_json(&synthetic_json(r#", "fraction": 0.4, "attack": {"kind": "fang_med", "m": 2}"#))
        .unwrap_err()
        .to_string();
    assert!(msg.contains("attack.m"), "{msg}");

    let msg = ExperimentConfig::from_json(&synthetic_json(r#", "metric": "jaccard""#)).unwrap_err().to_string();
    assert!(msg.contains("metric") && msg.contains("jaccard"), "{msg}");
}

#[test]
fn bulyan_precondition_surfaces_as_config_error() {
    let cfg = config(r#", "defense": {"kind": "bulyan"}, "attack": {"kind": "fang_med", "m": 3}"#);
    let mut sim = Simulation::new(&cfg, data(&cfg), 0).unwrap();
    let e = sim.step().unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
}

#[test]
fn hash_tracks_config_content() {
    let a = config("");
    let b = config("");
    assert_eq!(a.hash(), b.hash());
    let mut c = a.clone();
    c.rounds += 1;
    assert_ne!(a.hash(), c.hash());
    let mut d = a.clone();
    d.attack = AttackSpec::FangMed { m: 1, b: 2.0 };
    assert_ne!(a.hash(), d.hash());
    // defaults written out or omitted hash the same
    let e = config(r#", "seed": 0, "fraction": 1.0"#);
    assert_eq!(a.hash(), e.hash());
}

#[test]
fn round_csv_round_trips() {
    let cfg = config(r#", "defense": {"kind": "fedcc"}, "attack": {"kind": "fang_med", "m": 2}"#);
    let run = run_experiment(&cfg, &data(&cfg), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_round_csv(&path, &run.logs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "round,accuracy,confidence,n_selected,suspects,wall_ms");
    let rows = read_round_csv(&path).unwrap();
    let expected: Vec<RoundRow> = run.logs.iter().map(RoundRow::from).collect();
    assert_eq!(rows, expected);
}

#[test]
fn targeted_run_logs_confidence_and_boost_default() {
    let cfg = config(r#", "attack": {"kind": "targeted_backdoor", "m": 2, "source_class": 0, "target_label": 3}"#);
    let mut sim = Simulation::new(&cfg, data(&cfg), 0).unwrap();
    let task = sim.backdoor().unwrap();
    assert_eq!(task.alpha_m, 5.0);
    assert_eq!(task.sample.target_label, 3);
    let out = sim.step().unwrap();
    let c = out.log.confidence.unwrap();
    assert!((0.0..=1.0).contains(&c));
}

#[test]
fn partial_participation_samples_without_replacement() {
    let cfg = config(r#", "fraction": 0.5"#);
    let sim = Simulation::new(&cfg, data(&cfg), 0).unwrap();
    let mut differ = false;
    for r in 1..=20 {
        let ids = sim.select_clients(r);
        assert_eq!(ids.len(), 5);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert!(ids.iter().all(|&c| c < 10));
        differ |= ids != sim.select_clients(1);
    }
    assert!(differ);
}
