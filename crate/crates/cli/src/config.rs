use std::fs;
use std::path::Path;

use mmsr_core::data::SyntheticConfig;
use mmsr_core::infer::{DEFAULT_OVERLAP, DEFAULT_TILE_SIZE};
use mmsr_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything the subcommands read from `--config`. Missing fields take
/// their defaults; unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synthetic: SyntheticConfig,
    pub patches_per_case: usize,
    /// Draw a fresh patch set every epoch.
    pub resample_each_epoch: bool,
    pub train: TrainConfig,
    pub tile_size: usize,
    pub overlap: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            patches_per_case: 2000,
            resample_each_epoch: false,
            train: TrainConfig::default(),
            tile_size: DEFAULT_TILE_SIZE,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}
