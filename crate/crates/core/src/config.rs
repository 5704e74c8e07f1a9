//! Experiment configuration: one JSON document per experiment.

use crate::aggregators::Defense;
use crate::attacks::LAMBDA_THRESHOLD;
use crate::error::{Error, Result};
use crate::nn::Architecture;
use crate::similarity::Metric;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX files; relative paths resolve against the config file's directory.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Gaussian classes from [`crate::data::synthetic_gaussian`]; the test
    /// set uses a different seed stream.
    Synthetic {
        n_classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
    },
}

fn default_conv_channels() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    FmnistCnn {
        #[serde(default = "default_conv_channels")]
        conv_channels: usize,
    },
    Cifar10Cnn,
    Lenet,
    /// Dense network sized from the dataset.
    Mlp {
        #[serde(default)]
        hidden: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Iid,
    Dirichlet { alpha: f64 },
}

fn default_threshold() -> f64 {
    LAMBDA_THRESHOLD
}

fn default_b() -> f32 {
    2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    #[default]
    None,
    FangKrum {
        m: usize,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    FangMed {
        m: usize,
        #[serde(default = "default_b")]
        b: f32,
    },
    TargetedBackdoor {
        m: usize,
        source_class: usize,
        target_label: usize,
        /// Defaults to participants per round divided by `m`.
        #[serde(default)]
        alpha_m: Option<f64>,
    },
}

impl AttackSpec {
    /// Number of malicious clients (ids `0..m`).
    pub fn attackers(&self) -> usize {
        match *self {
            AttackSpec::None => 0,
            AttackSpec::FangKrum { m, .. } | AttackSpec::FangMed { m, .. } | AttackSpec::TargetedBackdoor { m, .. } => m,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::FangKrum { .. } => "fang_krum",
            AttackSpec::FangMed { .. } => "fang_med",
            AttackSpec::TargetedBackdoor { .. } => "targeted_backdoor",
        }
    }

    pub fn is_targeted(&self) -> bool {
        matches!(self, AttackSpec::TargetedBackdoor { .. })
    }
}

fn default_fraction() -> f64 {
    1.0
}
fn default_benign_epochs() -> usize {
    3
}
fn default_malicious_epochs() -> usize {
    6
}
fn default_lr() -> f32 {
    0.001
}
fn default_batch_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub partition: PartitionSpec,
    pub total_clients: usize,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    pub rounds: usize,
    #[serde(default)]
    pub attack: AttackSpec,
    pub defense: Defense,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default = "default_benign_epochs")]
    pub benign_epochs: usize,
    #[serde(default = "default_malicious_epochs")]
    pub malicious_epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    /// Parses and validates a JSON config. Errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Clients taking part in each round, `ceil(C·k)`.
    pub fn participants_per_round(&self) -> usize {
        ((self.fraction * self.total_clients as f64).ceil() as usize).clamp(1, self.total_clients)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(invalid("total_clients", "must be >= 1"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(invalid("fraction", format!("must be in (0, 1], got {}", self.fraction)));
        }
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", format!("must be > 0, got {}", self.lr)));
        }
        if let PartitionSpec::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(invalid("partition.alpha", format!("must be > 0, got {alpha}")));
            }
        }
        let m = self.attack.attackers();
        if self.attack != AttackSpec::None && m == 0 {
            return Err(invalid("attack.m", "must be >= 1 for an attack"));
        }
        let n = self.participants_per_round();
        if 2 * m >= n {
            return Err(invalid(
                "attack.m",
                format!("{m} attackers is not a minority of {n} participants per round"),
            ));
        }
        match self.attack {
            AttackSpec::FangMed { b, .. } if !(b > 1.0 && b.is_finite()) => {
                return Err(invalid("attack.b", format!("must be > 1, got {b}")));
            }
            AttackSpec::FangKrum { threshold, .. } if !(threshold > 0.0) => {
                return Err(invalid("attack.threshold", format!("must be > 0, got {threshold}")));
            }
            AttackSpec::TargetedBackdoor {
                source_class,
                target_label,
                alpha_m,
                ..
            } => {
                if source_class == target_label {
                    return Err(invalid("attack.target_label", "must differ from source_class"));
                }
                if let Some(a) = alpha_m {
                    if !(a >= 1.0 && a.is_finite()) {
                        return Err(invalid("attack.alpha_m", format!("must be >= 1, got {a}")));
                    }
                }
            }
            _ => {}
        }
        if let DatasetSpec::Synthetic {
            n_classes,
            dim,
            train_per_class,
            test_per_class,
            spread,
        } = self.dataset
        {
            if n_classes < 2 || dim < n_classes || train_per_class == 0 || test_per_class == 0 || !(spread > 0.0) {
                return Err(invalid("dataset", "synthetic needs n_classes >= 2, dim >= n_classes, samples >= 1 and spread > 0"));
            }
        }
        if let ModelSpec::FmnistCnn { conv_channels: 0 } = self.model {
            return Err(invalid("model.conv_channels", "must be >= 1"));
        }
        Ok(())
    }

    /// Builds the network for inputs of shape `[C, H, W]` with `n_classes`.
    pub fn architecture(&self, input: [usize; 3], n_classes: usize) -> Result<Architecture> {
        let arch = match &self.model {
            ModelSpec::FmnistCnn { conv_channels } => Architecture::fmnist_cnn_with_width(*conv_channels),
            ModelSpec::Cifar10Cnn => Architecture::cifar10_cnn(),
            ModelSpec::Lenet => Architecture::lenet_cifar100(),
            ModelSpec::Mlp { hidden } => Architecture::mlp(input, hidden, n_classes)?,
        };
        if arch.input_shape() != input || arch.n_classes() != n_classes {
            return Err(invalid(
                "model",
                format!(
                    "network expects input {:?} with {} classes, dataset has {input:?} with {n_classes}",
                    arch.input_shape(),
                    arch.n_classes()
                ),
            ));
        }
        Ok(arch)
    }

    /// SHA-256 of the canonical JSON serialisation (all fields, defaults
    /// filled in).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
