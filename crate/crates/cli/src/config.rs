//! Optional TOML run configuration. Every value here is overridden by the
//! matching command-line flag and falls back to the built-in default.

use std::path::Path;

use musim_core::corpus::{Split, SynthSpec};
use musim_core::evaluation::{Space, VqConfig};
use musim_core::features::FeatureConfig;
use musim_core::losses::LossConfig;
use musim_core::training::TrainConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub features: Option<FeatureConfig>,
    pub synth: Option<SynthSpec>,
    pub sample: SampleSection,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
    pub vq: Option<VqConfig>,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub per_condition: Option<usize>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub preset: Option<String>,
    pub loss: Option<LossConfig>,
    pub optimizer: Option<TrainConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub space: Option<Space>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub host: Option<String>,
    pub port: Option<u16>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    pub fn features(&self) -> FeatureConfig {
        self.features.clone().unwrap_or_default()
    }
}
