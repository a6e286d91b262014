//! Experiment configuration read from a TOML file.

use std::path::{Path, PathBuf};

use condcomp::early_exit::{EeConfig, GateMode};
use condcomp::transformer::ExitPolicy;
use condcomp::{ModelSpec, OptimizerKind};
use serde::{Deserialize, Serialize};

use crate::data::TaskParams;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub sampler: SamplerSchedule,
    #[serde(default)]
    pub early_exit: EeConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_batch() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3e-3,
        }
    }
}

/// Temperature of straight-through sampling, annealed geometrically from
/// `tau_start` in the first epoch to `tau_end` in the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    /// Gumbel noise in token selection and binary gates during training.
    pub noise: bool,
    /// Train skip and exit gates as straight-through binary samples.
    pub binary_gates: bool,
}

impl Default for SamplerSchedule {
    fn default() -> Self {
        Self {
            tau_start: 5.0,
            tau_end: 0.5,
            noise: true,
            binary_gates: false,
        }
    }
}

impl SamplerSchedule {
    /// Temperature for `epoch` (0-based) of `epochs`.
    pub fn tau(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.tau_start;
        }
        let t = epoch as f64 / (epochs - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub task: TaskParams,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Invalid(m) => HarnessError::Invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        self.model.validate().map_err(|e| HarnessError::Invalid(format!("model: {e}")))?;
        self.early_exit
            .validate(self.model.n_exits())
            .map_err(|e| HarnessError::Invalid(format!("early_exit: {e}")))?;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad(format!("optimizer.lr must be positive, got {}", self.optimizer.lr));
        }
        let s = &self.sampler;
        if !(s.tau_start > 0.0 && s.tau_end > 0.0 && s.tau_start.is_finite() && s.tau_end.is_finite()) {
            return bad("sampler temperatures must be positive".into());
        }
        if self.dataset.train == 0 || self.dataset.val == 0 || self.dataset.test == 0 {
            return bad("every dataset split needs at least one sample".into());
        }
        self.dataset.task.validate()?;
        let task = &self.dataset.task;
        if task.dim() != self.model.d_input {
            return bad(format!("dataset dim {} but model.d_input {}", task.dim(), self.model.d_input));
        }
        if task.classes() != self.model.n_classes {
            return bad(format!(
                "dataset has {} classes but model.n_classes is {}",
                task.classes(),
                self.model.n_classes
            ));
        }
        if let Some(m) = self.model.max_tokens {
            if task.tokens() > m {
                return bad(format!("{} tokens per sample exceed model.max_tokens {m}", task.tokens()));
            }
        }
        for (i, b) in self.model.blocks.iter().enumerate() {
            if let Some(moe) = &b.moe {
                if moe.strategy == condcomp::routing::RoutingStrategy::ExpertChoice && moe.k > task.tokens() {
                    return bad(format!("block {i}: expert choice k {} exceeds {} tokens", moe.k, task.tokens()));
                }
            }
        }
        Ok(())
    }

    /// Exit rule used at evaluation time.
    pub fn policy(&self) -> ExitPolicy {
        if self.model.n_exits() == 0 {
            return ExitPolicy::Final;
        }
        match self.early_exit.gate_mode {
            GateMode::HeuristicThreshold => ExitPolicy::Threshold {
                rule: self.early_exit.rule,
                threshold: self.early_exit.threshold,
            },
            GateMode::DifferentiableBranching => ExitPolicy::Gated,
        }
    }
}
