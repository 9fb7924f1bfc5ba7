//! TOML experiment configuration shared by the CLI subcommands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ablation::{AblationConfig, Arm};
use super::data::SyntheticSpec;
use super::evaluate::{EvalConfig, EvalMode};
use super::train::TrainConfig;
use crate::error::{MclError, Result};

pub const SEED_ENV: &str = "MCLKIT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationOptions {
    pub seeds: usize,
    pub arms: Vec<Arm>,
    pub sei_mode: EvalMode,
    pub min_aux_free_drop: f64,
}

impl Default for AblationOptions {
    fn default() -> Self {
        let d = AblationConfig::default();
        Self {
            seeds: d.seeds,
            arms: d.arms,
            sei_mode: d.sei_mode,
            min_aux_free_drop: d.min_aux_free_drop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When set, overrides the data, training and ablation seeds.
    pub seed: Option<u64>,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationOptions,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Applies the `MCLKIT_SEED` override and propagates `seed`.
    pub fn resolve(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse::<u64>()
                .map_err(|_| MclError::InvalidConfig(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
            self.seed = Some(seed);
        }
        if let Some(seed) = self.seed {
            self.data.seed = seed;
            self.train.seed = seed;
        }
        Ok(self)
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            base_seed: self.seed.unwrap_or(self.train.seed),
            seeds: self.ablation.seeds,
            arms: self.ablation.arms.clone(),
            sei_mode: self.ablation.sei_mode,
            data: self.data.clone(),
            train: self.train.clone(),
            eval: self.eval.clone(),
            min_aux_free_drop: self.ablation.min_aux_free_drop,
        }
    }
}
