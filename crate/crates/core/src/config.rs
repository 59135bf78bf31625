//! Run-level configuration: one struct aggregating every stage's parameters,
//! loadable from TOML with defaults for every field so a partial file or an
//! empty one is always valid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ba::BAConfig;
use crate::keyframes::KeyframeConfig;
use crate::mapping::MappingConfig;
use crate::render::RenderConfig;
use crate::seq::SyntheticSceneSpec;
use crate::tracking::TrackingConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config encode: {0}")]
    Encode(#[from] toml::ser::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Scheduling of the three stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Strictly sequential; byte-identical outputs per seed.
    #[default]
    Deterministic,
    /// Mapping bursts run on a worker thread while tracking continues on the
    /// previous field snapshot. Kept out of the acceptance gate.
    Pipelined,
}

/// Where frames come from. Exactly one source must be set.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default)]
pub struct InputConfig {
    /// TUM-layout dataset directory.
    pub dataset: Option<PathBuf>,
    /// Synthetic sequence specification.
    pub synthetic: Option<SyntheticSceneSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Corner budget per frame.
    pub target_count: usize,
}

impl Default for FeatureConfig {
    fn default() -> FeatureConfig {
        FeatureConfig { target_count: 1000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub input: InputConfig,
    pub mode: RunMode,
    pub seed: u64,
    pub max_frames: Option<usize>,
    pub out: Option<PathBuf>,
    pub features: FeatureConfig,
    pub render: RenderConfig,
    pub tracking: TrackingConfig,
    pub mapping: MappingConfig,
    pub keyframes: KeyframeConfig,
    pub ba: BAConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Full effective configuration as TOML, for the output directory echo.
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// A run needs exactly one input source.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.input.dataset, &self.input.synthetic) {
            (Some(_), Some(_)) => Err(ConfigError::Invalid(
                "both dataset and synthetic inputs are set; pick one".into(),
            )),
            (None, None) => {
                Err(ConfigError::Invalid("no input source: set dataset or synthetic".into()))
            }
            _ => Ok(()),
        }
    }
}
