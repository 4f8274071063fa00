use std::fs;
use std::path::Path;

use fbcc_core::data::StreamConfig;
use fbcc_core::engine::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "FBCC_SEED";

/// Per-task retention probabilities rising linearly from `p_first` to
/// `p_last`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Imbalance {
    pub p_first: f64,
    pub p_last: f64,
}

impl std::str::FromStr for Imbalance {
    type Err = String;

    /// Parses `"0.1:1.0"`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| format!("expected P_FIRST:P_LAST, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
        Ok(Imbalance {
            p_first: parse(a)?,
            p_last: parse(b)?,
        })
    }
}

/// Everything a run depends on. One seed drives data generation and
/// training alike.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub stream: StreamConfig,
    pub imbalance: Option<Imbalance>,
    pub train: TrainConfig,
    /// Seeds shared by every row of an ablation sweep; empty means `[seed]`.
    pub ablation_seeds: Vec<u64>,
}

impl RunConfig {
    /// Reads a config file. A run manifest is accepted too, in which case
    /// its resolved config is used.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let value = match value {
            serde_json::Value::Object(mut map) if map.contains_key("artifacts") => {
                map.remove("config").unwrap_or_default()
            }
            other => other,
        };
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    /// Applies the seed override from the environment, copies the seed and
    /// input width into the training config, and validates.
    pub fn resolve(mut self) -> Result<Self> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        self.train.seed = self.seed;
        self.train.sizes.input_dim = self.stream.input_dim;
        self.stream.validate()?;
        self.train.augmentation.validate()?;
        self.train.sizes.validate()?;
        self.train.validate(self.stream.num_tasks())?;
        Ok(self)
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        if self.ablation_seeds.is_empty() {
            vec![self.seed]
        } else {
            self.ablation_seeds.clone()
        }
    }
}
