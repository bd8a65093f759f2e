use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nrs_core::corpus::{GeneratorConfig, SplitRatios};
use nrs_core::embed::{PoolingSpec, ProviderConfig};
use nrs_core::model::{DEFAULT_BLOCKS, DEFAULT_HIDDEN};
use nrs_core::optim::{AdamConfig, LrSchedule};
use nrs_core::train::TrainPlan;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            blocks: DEFAULT_BLOCKS,
        }
    }
}

/// One JSON document drives every command; command-line flags win over it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub split: SplitRatios,
    pub provider: ProviderConfig,
    pub pooling: PoolingSpec,
    pub model: ModelShape,
    pub plan: TrainPlan,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.split.validate().map_err(|e| cfg(&e))?;
        self.plan.validate().map_err(|e| cfg(&e))?;
        self.schedule.validate().map_err(|e| cfg(&e))?;
        self.adam.validate().map_err(|e| cfg(&e))?;
        if self.model.hidden == 0 || self.model.blocks == 0 {
            return Err(CliError::Config("model hidden and blocks must be positive".into()));
        }
        Ok(())
    }
}
