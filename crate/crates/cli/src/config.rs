//! JSON pipeline configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use caki_core::encoder::SyntheticWorldSpec;
use caki_core::prompt::TrainConfig;
use caki_core::qkpm::QkpmConfig;

use crate::CliError;

/// Where image and text features come from. Exactly one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum WorldSource {
    Synthetic(SyntheticWorldSpec),
    Offline { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Training shots per base class.
    pub shots: usize,
    pub base_fraction: f64,
    pub test_per_class: usize,
    pub seeds: Vec<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            shots: 1,
            base_fraction: 0.5,
            test_per_class: 100,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub bank: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub world: WorldSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub qkpm: QkpmConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl PipelineConfig {
    /// Reads and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let WorldSource::Offline { path } = &mut self.world {
            fix(path);
        }
        for p in [&mut self.output.bank, &mut self.output.features, &mut self.output.csv]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |e: caki_core::CakiError| CliError::Config(e.to_string());
        if let WorldSource::Synthetic(spec) = &self.world {
            spec.validate().map_err(core)?;
        }
        self.train.validate().map_err(core)?;
        self.qkpm.validate().map_err(core)?;
        let s = &self.split;
        if s.shots == 0 {
            return Err(CliError::Config("split.shots must be at least 1".into()));
        }
        if !(s.base_fraction > 0.0 && s.base_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "split.base_fraction must lie in (0, 1), got {}",
                s.base_fraction
            )));
        }
        if s.seeds.is_empty() {
            return Err(CliError::Config("split.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Training settings for one split seed.
    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed.wrapping_add(seed),
            ..self.train
        }
    }
}
