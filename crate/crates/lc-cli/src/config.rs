//! One JSON config file drives every command; command-line flags override
//! individual fields and the merged result is dumped next to the outputs so
//! a run can be reproduced from its own artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lc_core::{BackboneConfig, Result, TrainConfig};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Keep the two rho fields in sync when either side is overridden.
    pub fn set_rho(&mut self, rho: f64) {
        self.backbone.rho = rho;
        self.train.rho = rho;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.backbone.seed = seed;
        self.train.seed = seed;
    }
}
