//! Experiment configuration: one strict JSON document per experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granularity::{ArchConfig, InitOptions, OptimizerKind};
use crate::harness::data::ToyTask;
use crate::harness::train::{LrSchedule, OptimSettings, RunConfig};
use crate::optim::{AdamWConfig, MuonConfig, SsoConfig};
use crate::spectral_geom::INIT_STD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub widths: Vec<usize>,
    pub etas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: ToyTask,
    pub model: ArchConfig,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub sso: SsoConfig,
    #[serde(default)]
    pub muon: MuonConfig,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
    /// Seeds initialization; the data order is seeded by `task.seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_run_name")]
    pub run_name: String,
}

fn default_init_std() -> f64 {
    INIT_STD
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_run_name() -> String {
    "run".to_string()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim().validate()?;
        if self.task.batch_size == 0 {
            return Err(Error::ConfigInvalid("task.batch_size must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::ConfigInvalid(format!("init_std must be positive, got {}", self.init_std)));
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::ConfigInvalid(format!("bad run_name `{}`", self.run_name)));
        }
        if let Some(s) = &self.sweep {
            if s.widths.is_empty() || s.etas.is_empty() {
                return Err(Error::ConfigInvalid("sweep needs widths and etas".into()));
            }
            if s.etas.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                return Err(Error::ConfigInvalid("sweep etas must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimSettings {
        OptimSettings {
            kind: self.optimizer,
            sso: self.sso,
            muon: self.muon,
            adamw: self.adamw,
        }
    }

    /// Initialization uses the sphere radius constant and scaler of `sso`
    /// whatever the optimizer, so every optimizer starts from the same point.
    pub fn init_options(&self) -> InitOptions {
        InitOptions {
            radius_c: self.sso.radius_c,
            init_std: self.init_std,
            seed: self.seed,
            scaler: self.sso.scaler,
            optimizer: self.optimizer,
        }
    }

    pub fn run_config(&self, output_dir: Option<&Path>) -> RunConfig {
        RunConfig {
            optim: self.optim(),
            schedule: self.schedule,
            output: output_dir.map(|d| (d.to_path_buf(), self.run_name.clone())),
        }
    }
}
