//! `RunConfig`: one JSON document covering every command. Flags override
//! file values; the effective document is echoed into each output.

use std::fs;
use std::path::Path;

use funedit_core::composer::EdgeMode;
use funedit_core::diffusion::{SamplerConfig, ScheduleSpec, TrainConfig};
use funedit_core::model::UNetConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `OR`, `EE`, `HR` or `all`.
    pub task: String,
    pub n: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { task: "all".into(), n: 3000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out atomic samples generated per task when no dataset is given.
    pub per_task: usize,
    pub data_seed: u64,
    pub moves: usize,
    pub move_seed: u64,
    /// Removal-mask dilation for movement; `None` scales with the image side.
    pub dilation_kernel: Option<usize>,
    pub edge: EdgeMode,
    pub sequential: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            per_task: 100,
            data_seed: 1_000_001,
            moves: 50,
            move_seed: 2_000_003,
            dilation_kernel: None,
            edge: EdgeMode::Band,
            sequential: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: UNetConfig,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"steps": 10}, "model": {"res_blocks_per_level": 1}}"#).unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.lr, 5e-5);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.model.res_blocks_per_level, 1);
        assert_eq!(c.model.base_channels, UNetConfig::default().base_channels);
        assert_eq!(RunConfig::from_json(&c.to_json().to_string()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"stpes": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sampler": {"steps": 4, "extra": 1}}"#).is_err());
    }
}
