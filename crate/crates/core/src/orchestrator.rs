//! The federated round loop: selection, local training, attack injection,
//! aggregation, evaluation and logging.

use crate::aggregators::{AggregationResult, ClientUpdate};
use crate::attacks::{craft_untargeted_krum, craft_untargeted_med, krum_selects_crafted, backdoor_local_train, BackdoorTask};
use crate::config::{AttackSpec, DatasetSpec, ExperimentConfig, PartitionSpec};
use crate::data::{dirichlet_partition, iid_partition, load_idx, make_backdoor_sample, synthetic_gaussian, Dataset, Partition};
use crate::error::{Error, Result};
use crate::nn::{init_model, Architecture, ModelParams};
use crate::rng::{derive_seed, purpose, rng_from};
use crate::train::{backdoor_confidence, evaluate_accuracy, local_train, TrainConfig};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

/// Train and test data shared by every run of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
}

impl ExperimentData {
    /// Loads or generates the datasets. Relative IDX paths resolve against
    /// `base_dir`.
    pub fn load(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Self> {
        let (train, test) = match &cfg.dataset {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let p = |f: &Path| base_dir.join(f);
                (
                    load_idx(p(train_images), p(train_labels))?,
                    load_idx(p(test_images), p(test_labels))?,
                )
            }
            DatasetSpec::Synthetic {
                n_classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
            } => (
                synthetic_gaussian(*n_classes, *dim, *train_per_class, *spread, cfg.seed)?,
                synthetic_gaussian(*n_classes, *dim, *test_per_class, *spread, derive_seed(cfg.seed, &[purpose::DATA]))?,
            ),
        };
        if train.len() < cfg.total_clients {
            return Err(Error::Config(format!(
                "total_clients: {} clients but only {} training samples",
                cfg.total_clients,
                train.len()
            )));
        }
        Ok(ExperimentData {
            train: Arc::new(train),
            test: Arc::new(test),
        })
    }
}

/// Everything logged about one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// 1-based round index.
    pub round: usize,
    /// Global test accuracy in percent.
    pub accuracy: f64,
    /// Backdoor confidence, targeted runs only.
    pub confidence: Option<f64>,
    pub participants: Vec<usize>,
    /// Attackers among the participants (ground truth).
    pub malicious: Vec<usize>,
    pub selected: Vec<usize>,
    /// Participants the aggregator left out.
    pub suspects: Vec<usize>,
    pub scores: Option<Vec<(usize, f64)>>,
    /// Final λ of the Krum attack.
    pub krum_lambda: Option<f64>,
    pub wall_ms: f64,
}

impl RoundLog {
    /// Same logged values, ignoring wall time.
    pub fn same_outcome(&self, other: &RoundLog, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= tol;
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        let scores = match (&self.scores, &other.scores) {
            (Some(a), Some(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.0 == y.0 && close(x.1, y.1)),
            (None, None) => true,
            _ => false,
        };
        self.round == other.round
            && close(self.accuracy, other.accuracy)
            && opt(self.confidence, other.confidence)
            && opt(self.krum_lambda, other.krum_lambda)
            && self.participants == other.participants
            && self.malicious == other.malicious
            && self.selected == other.selected
            && self.suspects == other.suspects
            && scores
    }
}

/// A round's log plus the updates the server received.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub log: RoundLog,
    pub updates: Vec<ClientUpdate>,
}

/// State of one seeded federated run.
pub struct Simulation {
    cfg: ExperimentConfig,
    seed: u64,
    data: ExperimentData,
    arch: Architecture,
    partition: Partition,
    global: ModelParams,
    backdoor: Option<BackdoorTask>,
    round: usize,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig, data: ExperimentData, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let train = &data.train;
        let arch = cfg.architecture(train.sample_shape(), train.n_classes())?;
        let partition = match cfg.partition {
            PartitionSpec::Iid => iid_partition(train.labels(), cfg.total_clients, seed)?,
            PartitionSpec::Dirichlet { alpha } => dirichlet_partition(train.labels(), cfg.total_clients, alpha, seed)?,
        };
        let backdoor = match cfg.attack {
            AttackSpec::TargetedBackdoor {
                m,
                source_class,
                target_label,
                alpha_m,
            } => Some(BackdoorTask {
                sample: make_backdoor_sample(train, source_class, target_label, seed)?,
                alpha_m: alpha_m.unwrap_or(cfg.participants_per_round() as f64 / m as f64),
            }),
            _ => None,
        };
        Ok(Simulation {
            global: init_model(&arch, seed),
            cfg: cfg.clone(),
            seed,
            data,
            arch,
            partition,
            backdoor,
            round: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn backdoor(&self) -> Option<&BackdoorTask> {
        self.backdoor.as_ref()
    }

    /// Client ids taking part in round `round` (ascending).
    pub fn select_clients(&self, round: usize) -> Vec<usize> {
        let k = self.cfg.total_clients;
        let n = self.cfg.participants_per_round();
        if n == k {
            return (0..k).collect();
        }
        let mut rng = rng_from(self.seed, &[purpose::SELECT, round as u64]);
        let mut ids = sample(&mut rng, k, n).into_vec();
        ids.sort_unstable();
        ids
    }

    fn train_cfg(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.cfg.batch_size,
            lr: self.cfg.lr,
        }
    }

    fn client_seed(&self, client: usize, round: usize) -> u64 {
        derive_seed(self.seed, &[purpose::TRAIN, client as u64, round as u64])
    }

    /// Runs one round and replaces the global model.
    pub fn step(&mut self) -> Result<RoundOutcome> {
        let start = Instant::now();
        self.round += 1;
        let round = self.round;
        let participants = self.select_clients(round);
        let m = self.cfg.attack.attackers();
        let is_malicious = |c: usize| self.cfg.attack != AttackSpec::None && c < m;
        let (malicious, benign): (Vec<usize>, Vec<usize>) = participants.iter().partition(|&&c| is_malicious(c));

        let benign_cfg = self.train_cfg(self.cfg.benign_epochs);
        let trained = benign
            .par_iter()
            .map(|&c| {
                local_train(
                    &self.arch,
                    &self.global,
                    &self.data.train,
                    &self.partition.clients[c],
                    &benign_cfg,
                    self.client_seed(c, round),
                    None,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let mut krum_lambda = None;
        let poisoned: Vec<ModelParams> = if malicious.is_empty() {
            Vec::new()
        } else {
            self.craft(&malicious, &trained, participants.len(), round, &mut krum_lambda)?
        };

        let mut updates: Vec<ClientUpdate> = malicious
            .iter()
            .zip(poisoned)
            .map(|(&c, params)| (c, params, true))
            .chain(benign.iter().zip(trained).map(|(&c, params)| (c, params, false)))
            .map(|(c, params, bad)| ClientUpdate {
                client_id: c,
                params,
                n_samples: self.partition.clients[c].len(),
                is_malicious_truth: bad,
            })
            .collect();
        updates.sort_by_key(|u| u.client_id);

        let result: AggregationResult =
            self.cfg
                .defense
                .aggregate(&self.global, &updates, &self.arch, self.cfg.metric, m)
                .map_err(|e| match e {
                    Error::Precondition(msg) => Error::Config(format!("defense: {msg}")),
                    other => other,
                })?;
        self.global = result.global_params;

        let accuracy = evaluate_accuracy(&self.arch, &self.global, &self.data.test)?;
        let confidence = match &self.backdoor {
            Some(task) => Some(backdoor_confidence(&self.arch, &self.global, &task.sample)?),
            None => None,
        };
        let suspects = participants
            .iter()
            .copied()
            .filter(|c| !result.selected_ids.contains(c))
            .collect();
        let log = RoundLog {
            round,
            accuracy,
            confidence,
            participants,
            malicious,
            selected: result.selected_ids,
            suspects,
            scores: result.scores,
            krum_lambda,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log::info!(
            "seed {} round {round}: acc {accuracy:.2} conf {confidence:?} suspects {:?}",
            self.seed,
            log.suspects
        );
        Ok(RoundOutcome { log, updates })
    }

    fn craft(
        &self,
        malicious: &[usize],
        benign: &[ModelParams],
        n: usize,
        round: usize,
        krum_lambda: &mut Option<f64>,
    ) -> Result<Vec<ModelParams>> {
        let m = malicious.len();
        match self.cfg.attack {
            AttackSpec::None => unreachable!("no attackers without an attack"),
            AttackSpec::FangKrum { threshold, .. } => {
                let c = craft_untargeted_krum(benign, &self.global, m, n, threshold, |crafted| {
                    krum_selects_crafted(benign, crafted, m)
                })?;
                *krum_lambda = Some(c.lambda);
                Ok(c.crafted)
            }
            AttackSpec::FangMed { b, .. } => {
                let mut rng = rng_from(self.seed, &[purpose::CRAFT, round as u64]);
                craft_untargeted_med(benign, &self.global, m, b, &mut rng)
            }
            AttackSpec::TargetedBackdoor { .. } => {
                let task = self.backdoor.as_ref().expect("targeted run has a task");
                let cfg = self.train_cfg(self.cfg.malicious_epochs);
                malicious
                    .par_iter()
                    .map(|&c| {
                        backdoor_local_train(
                            &self.arch,
                            &self.global,
                            &self.data.train,
                            &self.partition.clients[c],
                            task,
                            &cfg,
                            self.client_seed(c, round),
                        )
                    })
                    .collect()
            }
        }
    }
}

/// Logs of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub logs: Vec<RoundLog>,
}

impl RunResult {
    pub fn final_accuracy(&self) -> f64 {
        self.logs.last().map_or(f64::NAN, |l| l.accuracy)
    }

    pub fn final_confidence(&self) -> Option<f64> {
        self.logs.last().and_then(|l| l.confidence)
    }
}

/// Runs `cfg.rounds` rounds from a fresh model for one seed.
pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<RunResult> {
    let mut sim = Simulation::new(cfg, data.clone(), seed)?;
    let logs = (0..cfg.rounds).map(|_| sim.step().map(|o| o.log)).collect::<Result<Vec<_>>>()?;
    Ok(RunResult { seed, logs })
}

/// Per-seed finals and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub attack: String,
    pub defense: String,
    pub metric: String,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub final_accuracy: Vec<f64>,
    pub final_confidence: Vec<Option<f64>>,
    pub mean_final_accuracy: f64,
    pub mean_final_confidence: Option<f64>,
}

impl Summary {
    pub fn new(cfg: &ExperimentConfig, runs: &[RunResult]) -> Self {
        let acc: Vec<f64> = runs.iter().map(RunResult::final_accuracy).collect();
        let conf: Vec<Option<f64>> = runs.iter().map(RunResult::final_confidence).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mean_conf = conf.iter().copied().collect::<Option<Vec<f64>>>().filter(|c| !c.is_empty()).map(|c| mean(&c));
        Summary {
            config_hash: cfg.hash(),
            attack: cfg.attack.name().into(),
            defense: cfg.defense.name().into(),
            metric: cfg.metric.name().into(),
            rounds: cfg.rounds,
            seeds: runs.iter().map(|r| r.seed).collect(),
            mean_final_accuracy: mean(&acc),
            final_accuracy: acc,
            final_confidence: conf,
            mean_final_confidence: mean_conf,
        }
    }
}

/// One CSV row of the round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub accuracy: f64,
    pub confidence: Option<f64>,
    pub n_selected: usize,
    /// Suspect client ids joined with `;`.
    pub suspects: String,
    pub wall_ms: f64,
}

impl From<&RoundLog> for RoundRow {
    fn from(l: &RoundLog) -> Self {
        RoundRow {
            round: l.round,
            accuracy: l.accuracy,
            confidence: l.confidence,
            n_selected: l.selected.len(),
            suspects: l.suspects.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
            wall_ms: l.wall_ms,
        }
    }
}

/// Writes `round,accuracy,confidence,n_selected,suspects,wall_ms`.
pub fn write_round_csv(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for l in logs {
        w.serialize(RoundRow::from(l))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_round_csv(path: &Path) -> Result<Vec<RoundRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One JSON object per round with full score vectors.
pub fn write_round_jsonl(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let mut out = String::new();
    for l in logs {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
