//! Experiment configuration documents (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::pipeline::RunConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotMode {
    #[default]
    EveryIteration,
    FinalOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One training run per seed; the first seed is used by single-run commands.
    pub seeds: Vec<u64>,
    /// Seed for expert training and demonstration sampling.
    pub expert_seed: u64,
    pub output_dir: PathBuf,
    /// Demonstration file written by `gen-expert` and read by `train`.
    pub demo_file: PathBuf,
    pub snapshots: SnapshotMode,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn preset(kind: EnvKind) -> Self {
        let run = match kind {
            EnvKind::Circle => RunConfig::point_circle(),
            EnvKind::Obstacle => RunConfig::point_obstacle(),
        };
        let name = format!("point_{kind}");
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            expert_seed: 1000,
            output_dir: PathBuf::from("runs").join(&name),
            demo_file: PathBuf::from("runs").join(&name).join("demos.csv"),
            snapshots: SnapshotMode::EveryIteration,
            run,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        if self.demo_file.as_os_str().is_empty() {
            return Err(Error::config("demo_file", "must not be empty"));
        }
        self.run.validate()
    }

    /// Parses and validates; relative paths stay relative to the working directory.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = message
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".to_string());
            let location = e
                .span()
                .map(|s| format!(" (line {})", text[..s.start].lines().count().max(1)))
                .unwrap_or_default();
            Error::config(field, format!("{message}{location}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }
}
