use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assign::{MatchCostWeights, TaskAlignedParams};
use crate::data::{DatasetSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{DetectionLossWeights, LossWeights, VarifocalParams};
use crate::masks::MaskMode;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Branches {
    /// Dense auxiliary head on the encoder levels.
    pub aux_cnn: bool,
    /// One-to-many decoder group supervised against replicated targets.
    pub o2m: bool,
    /// Extra one-to-one groups with random self-attention masks.
    pub perturbation_groups: bool,
}

impl Branches {
    pub const ALL: Self = Self {
        aux_cnn: true,
        o2m: true,
        perturbation_groups: true,
    };
    pub const NONE: Self = Self {
        aux_cnn: false,
        o2m: false,
        perturbation_groups: false,
    };
}

impl Default for Branches {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of all steps with linear learning-rate warmup.
    pub warmup_fraction: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.05,
            grad_clip: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignmentConfig {
    pub match_costs: MatchCostWeights,
    pub atss_top_k: usize,
    pub task_aligned: TaskAlignedParams,
    /// Share of training epochs (at least one) during which the dense head
    /// uses ATSS before switching to task-aligned assignment.
    pub atss_epoch_fraction: f64,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        Self {
            match_costs: MatchCostWeights::default(),
            atss_top_k: 9,
            task_aligned: TaskAlignedParams::default(),
            atss_epoch_fraction: 1.0 / 24.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxLossWeights {
    pub vfl: f64,
    pub giou: f64,
    pub dfl: f64,
}

impl Default for AuxLossWeights {
    fn default() -> Self {
        Self {
            vfl: 1.0,
            giou: 1.0,
            dfl: 1.0,
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// One-to-one query groups `N` (used when perturbation groups are on).
    pub n_groups: usize,
    /// Target replication factor `m` of the one-to-many group.
    pub replication: usize,
    pub keep_probability: f64,
    pub mask_mode: MaskMode,
    pub loss_weights: LossWeights,
    pub branches: Branches,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub assignment: AssignmentConfig,
    pub detection_loss: DetectionLossWeights,
    pub varifocal: VarifocalParams,
    pub aux_loss: AuxLossWeights,
    pub train_data: DatasetSpec,
    pub eval_data: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 12,
            batch_size: 4,
            n_groups: 3,
            replication: 4,
            keep_probability: 0.9,
            mask_mode: MaskMode::Additive,
            loss_weights: LossWeights::default(),
            branches: Branches::ALL,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            assignment: AssignmentConfig::default(),
            detection_loss: DetectionLossWeights::default(),
            varifocal: VarifocalParams::default(),
            aux_loss: AuxLossWeights::default(),
            train_data: DatasetSpec::Synthetic(SyntheticSpec::new(1, 256, 64, 64)),
            eval_data: DatasetSpec::Synthetic(SyntheticSpec::new(2, 64, 64, 64)),
        }
    }
}

impl RunConfig {
    /// The plain one-to-one configuration: no auxiliary branches.
    pub fn baseline(mut self) -> Self {
        self.branches = Branches::NONE;
        self
    }

    /// One-to-one groups actually run.
    pub fn active_groups(&self) -> usize {
        if self.branches.perturbation_groups {
            self.n_groups
        } else {
            1
        }
    }

    pub fn active_keep_probability(&self) -> f64 {
        if self.branches.perturbation_groups {
            self.keep_probability
        } else {
            1.0
        }
    }

    /// First epoch that uses task-aligned assignment in the dense head.
    pub fn atss_epochs(&self) -> usize {
        ((self.epochs as f64 * self.assignment.atss_epoch_fraction).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_groups == 0 {
            return bad("n_groups must be >= 1");
        }
        if self.replication == 0 {
            return bad("replication must be >= 1");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1");
        }
        if !(self.keep_probability > 0.0 && self.keep_probability <= 1.0) {
            return bad("keep_probability must lie in (0, 1]");
        }
        self.loss_weights
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.weight_decay < 0.0 || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer settings out of range");
        }
        if !(0.0..=1.0).contains(&o.warmup_fraction) || o.grad_clip < 0.0 {
            return bad("warmup_fraction must lie in [0, 1] and grad_clip be >= 0");
        }
        if !(0.0..=1.0).contains(&self.assignment.atss_epoch_fraction) || self.assignment.atss_top_k == 0 {
            return bad("atss settings out of range");
        }
        self.model.validate()?;
        for data in [&self.train_data, &self.eval_data] {
            if let DatasetSpec::Synthetic(s) = data {
                s.validate()?;
            }
            if let Some(c) = data.n_classes() {
                if c != self.model.n_classes {
                    return Err(Error::Config(format!(
                        "dataset has {c} classes, model has {}",
                        self.model.n_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
