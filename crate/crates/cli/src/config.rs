use std::fs;
use std::path::{Path, PathBuf};

use jers_core::dataset::{Split, SplitSizes};
use jers_core::networks::ArchConfig;
use jers_core::phantom::PhantomSpec;
use jers_core::pipeline::{Stages, Variant};
use jers_core::train::TrainSettings;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// `(M, N) = (s, s)` for every `s` in `stages`.
    Stages,
    /// Segmentation weight.
    Lambda,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub stages: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Stages,
            stages: (1..=7).collect(),
            lambdas: vec![1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
        }
    }
}

/// Everything a command needs. Written as `config.json` into every output
/// directory; reading that file back reproduces the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub master_seed: u64,
    pub splits: SplitSizes,
    /// Dataset directory written by `phantom`; when absent the dataset is
    /// generated in memory from `phantom` and `master_seed`.
    pub data: Option<PathBuf>,
    pub arch: ArchConfig,
    pub stages: Stages,
    pub variant: Variant,
    pub training: TrainSettings,
    /// Checkpoint to evaluate, or to resume training from.
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub sweep: SweepConfig,
    pub ablate: Vec<Variant>,
    /// Write mid-slice images during evaluation.
    pub images: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            master_seed: 1000,
            splits: SplitSizes::default(),
            data: None,
            arch: ArchConfig::desk(),
            stages: Stages::default(),
            variant: Variant::Full,
            training: TrainSettings::default(),
            checkpoint: None,
            split: Split::Test,
            sweep: SweepConfig::default(),
            ablate: Variant::ALL.to_vec(),
            images: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.arch.validate()?;
        self.stages.validate()?;
        self.training.weights.validate()?;
        self.training.augmentation.validate()?;
        self.training.optimizer.validate()?;
        if self.arch.classes != self.phantom.classes {
            return Err(CliError::Config(format!(
                "arch.classes {} differs from phantom.classes {}",
                self.arch.classes, self.phantom.classes
            )));
        }
        if let Some(d) = self.phantom.resolution.iter().find(|&&d| d % 4 != 0) {
            return Err(CliError::Config(format!(
                "resolution extents must be multiples of 4, got {d}"
            )));
        }
        if self.splits.train == 0 {
            return Err(CliError::Config("splits.train must be at least 1".into()));
        }
        if self.sweep.stages.contains(&0) {
            return Err(CliError::Config(
                "sweep stage counts must be at least 1".into(),
            ));
        }
        if self
            .sweep
            .lambdas
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(CliError::Config(
                "sweep lambdas must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}
