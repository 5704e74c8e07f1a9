//! Command implementations behind the `fedcc` binary and the files they
//! write.

use crate::aggregators::Defense;
use crate::clustering::per_layer_cluster_distance;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::orchestrator::{run_experiment, write_round_csv, write_round_jsonl, ExperimentData, RunResult, Simulation, Summary};
use crate::similarity::Metric;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub version: String,
}

fn load(config_path: &Path) -> Result<(ExperimentConfig, ExperimentData)> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let data = ExperimentData::load(&cfg, base)?;
    Ok((cfg, data))
}

fn prepare_out(out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned())
}

fn write_manifest(out_dir: &Path, command: &str, cfg: &ExperimentConfig, seeds: &[u64], outputs: &[PathBuf]) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        config_hash: cfg.hash(),
        seeds: seeds.to_vec(),
        outputs: outputs.iter().map(|p| file_name(p)).collect(),
        version: format!("fedcc {}", env!("CARGO_PKG_VERSION")),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)
}

fn seeds_or_default(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    }
}

/// Runs the experiment once per seed and writes `round_log_seed<k>.csv`,
/// `round_log_seed<k>.jsonl`, `summary.json` and `manifest.json`.
pub fn cmd_run(config_path: &Path, out_dir: &Path, seeds: &[u64]) -> Result<Summary> {
    let (cfg, data) = load(config_path)?;
    prepare_out(out_dir)?;
    let seeds = seeds_or_default(&cfg, seeds);
    let mut outputs = Vec::new();
    let mut runs = Vec::new();
    for &seed in &seeds {
        let run = run_experiment(&cfg, &data, seed)?;
        let csv = out_dir.join(format!("round_log_seed{seed}.csv"));
        let jsonl = out_dir.join(format!("round_log_seed{seed}.jsonl"));
        write_round_csv(&csv, &run.logs)?;
        write_round_jsonl(&jsonl, &run.logs)?;
        outputs.extend([csv, jsonl]);
        runs.push(run);
    }
    let summary = Summary::new(&cfg, &runs);
    let summary_path = out_dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    outputs.push(summary_path);
    write_manifest(out_dir, "run", &cfg, &seeds, &outputs)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDistance {
    pub layer: String,
    pub root_distance: f64,
}

/// Runs `rounds` rounds per seed and reports, for the updates received in
/// the last of them, each layer's single-linkage root distance. Writes
/// `layer_distance_seed<k>.csv` with columns `layer,root_distance`.
pub fn cmd_layer_analysis(config_path: &Path, out_dir: &Path, seeds: &[u64], rounds: usize) -> Result<Vec<(u64, Vec<LayerDistance>)>> {
    let (cfg, data) = load(config_path)?;
    if rounds == 0 {
        return Err(Error::Config("round: must be >= 1".into()));
    }
    prepare_out(out_dir)?;
    let seeds = seeds_or_default(&cfg, seeds);
    let mut outputs = Vec::new();
    let mut all = Vec::new();
    for &seed in &seeds {
        let mut sim = Simulation::new(&cfg, data.clone(), seed)?;
        let mut outcome = sim.step()?;
        for _ in 1..rounds {
            outcome = sim.step()?;
        }
        let params: Vec<_> = outcome.updates.into_iter().map(|u| u.params).collect();
        let rows: Vec<LayerDistance> = per_layer_cluster_distance(&params)?
            .into_iter()
            .map(|(layer, root_distance)| LayerDistance { layer, root_distance })
            .collect();
        let path = out_dir.join(format!("layer_distance_seed{seed}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        outputs.push(path);
        all.push((seed, rows));
    }
    write_manifest(out_dir, "layer-analysis", &cfg, &seeds, &outputs)?;
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub metric: String,
    pub mean_final_accuracy: f64,
    pub mean_final_confidence: Option<f64>,
    /// Fraction of rounds whose suspect set equals the participating
    /// attackers.
    pub exact_exclusion_rate: f64,
}

/// Runs the experiment under FedCC with each similarity metric and writes
/// `metric_ablation.csv`.
pub fn cmd_metric_ablation(config_path: &Path, out_dir: &Path, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let (original, data) = load(config_path)?;
    let mut cfg = original.clone();
    cfg.defense = Defense::Fedcc;
    prepare_out(out_dir)?;
    let seeds = seeds_or_default(&cfg, seeds);
    let mut rows = Vec::new();
    for metric in Metric::ALL {
        cfg.metric = metric;
        let runs = seeds
            .iter()
            .map(|&s| run_experiment(&cfg, &data, s))
            .collect::<Result<Vec<RunResult>>>()?;
        let summary = Summary::new(&cfg, &runs);
        let logs: Vec<_> = runs.iter().flat_map(|r| &r.logs).collect();
        let exact = logs.iter().filter(|l| l.suspects == l.malicious).count();
        rows.push(AblationRow {
            metric: metric.name().into(),
            mean_final_accuracy: summary.mean_final_accuracy,
            mean_final_confidence: summary.mean_final_confidence,
            exact_exclusion_rate: exact as f64 / logs.len() as f64,
        });
    }
    let path = out_dir.join("metric_ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_manifest(out_dir, "metric-ablation", &original, &seeds, &[path])?;
    Ok(rows)
}
