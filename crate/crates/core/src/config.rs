//! Tool configuration, read from TOML or JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RelationConfig;
use crate::pipelines::DEFAULT_RELABEL_T;
use crate::scg::TrainConfig;
use crate::synth::SynthSpec;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub annotations: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub relations: RelationConfig,
    pub detector_thresholds: Vec<f64>,
    pub relabel_t: f64,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub paths: Paths,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            relations: RelationConfig::all(),
            detector_thresholds: vec![0.5, 0.6, 0.7],
            relabel_t: DEFAULT_RELABEL_T,
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            paths: Paths::default(),
        }
    }
}

impl ToolConfig {
    pub fn validate(&self) -> Result<()> {
        self.relations.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.detector_thresholds.is_empty() {
            return Err(Error::Config("detector_thresholds is empty".into()));
        }
        if let Some(t) = self.detector_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!("detector threshold {t} outside (0, 1]")));
        }
        if !(0.0..1.0).contains(&self.relabel_t) {
            return Err(Error::Config(format!("relabel_t {} outside [0, 1)", self.relabel_t)));
        }
        Ok(())
    }

    /// Parses JSON when the text starts with `{`, TOML otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("json config: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(format!("toml config: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
