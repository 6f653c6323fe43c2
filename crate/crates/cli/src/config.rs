use std::path::{Path, PathBuf};

use isocomp_core::distill::DistillConfig;
use isocomp_core::importance::OutputSpace;
use isocomp_core::model::{make_preset, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Declarative experiment description. Every field is optional in the JSON
/// file; command-line flags override whatever the file sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Named architecture; ignored when `model` is given.
    pub preset: Option<String>,
    /// Explicit architecture.
    pub model: Option<ModelConfig>,
    /// Drives model initialization, batch order and calibration sampling.
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Text file, or an `.actk` token cache. The bundled sample when unset.
    pub corpus: Option<PathBuf>,
    pub validation_fraction: f64,
    pub teacher: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Preset whose parameter count is the compression baseline for `count`.
    pub reference: Option<String>,
    /// Calibration sequences for `score`; 512 for 1024-wide models, 64 otherwise.
    pub calibration_size: Option<usize>,
    pub output_space: OutputSpace,
    /// Seed replicas for `ablation`, starting at `seed`.
    pub seeds: usize,
    /// Student presets compared by `ablation`.
    pub students: Vec<String>,
    pub progress: bool,
    pub train: DistillConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            model: None,
            seed: 0,
            out: None,
            corpus: None,
            validation_fraction: 0.1,
            teacher: None,
            checkpoint: None,
            reference: None,
            calibration_size: None,
            output_space: OutputSpace::Logits,
            seeds: 3,
            students: vec!["cli_tiny".into(), "uniform_tiny".into()],
            progress: true,
            train: DistillConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The architecture from `model`, else `preset`, else `fallback`.
    pub fn model_config(&self, fallback: &str) -> Result<ModelConfig, CliError> {
        let mut cfg = match (&self.model, &self.preset) {
            (Some(m), _) => m.clone(),
            (None, Some(p)) => make_preset(p).map_err(|e| CliError::Config(format!("preset: {e}")))?,
            (None, None) => make_preset(fallback).map_err(|e| CliError::Config(e.to_string()))?,
        };
        cfg.seed = self.seed;
        cfg.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        Ok(cfg)
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> DistillConfig {
        DistillConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn out_dir(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command))
    }

    /// Checks shared by every training or evaluating command.
    pub fn validate_common(&self) -> Result<(), CliError> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "validation_fraction: must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        if let Some(c) = &self.corpus {
            require_file("corpus", c)?;
        }
        Ok(())
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.into()))?;
        std::fs::write(dir.join("config.json"), json).map_err(|e| CliError::runtime(e, dir))
    }
}

/// Missing inputs are data errors, reported before anything is written.
pub fn require_file(key: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!("{key}: {} does not exist", path.display())))
    }
}
