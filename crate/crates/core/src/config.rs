//! Run configuration read by the command-line driver.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HingeError, Result};
use crate::net::{ArchSpec, DistillConfig, SyntheticConfig, TrainConfig};
use crate::solver::CompressionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Defaults to the toy residual net sized for `data`.
    pub arch: Option<ArchSpec>,
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    /// Optimizer settings after compaction.
    pub finetune: TrainConfig,
    pub compress: CompressionConfig,
    pub distill: DistillConfig,
    /// Weight init and batch order.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: None,
            data: SyntheticConfig::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig { epochs: 8, lr: 0.002, ..TrainConfig::default() },
            compress: CompressionConfig::default(),
            distill: DistillConfig::default(),
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| HingeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HingeError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn arch(&self) -> ArchSpec {
        self.arch
            .clone()
            .unwrap_or_else(|| ArchSpec::toy_residual(self.data.input_shape(), self.data.classes))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.distill.validate()?;
        let arch = self.arch();
        arch.validate()?;
        if arch.input != self.data.input_shape() || arch.classes != self.data.classes {
            return Err(HingeError::Config("arch input or classes disagree with data".into()));
        }
        // the target may still come from the command line; check the rest
        CompressionConfig { target_ratio: 0.5, ..self.compress.clone() }.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.compress.regularizer.lambda, 2e-4);
        assert_eq!(cfg.distill.temperature, 4.0);
        assert_eq!(cfg.arch().blocks.len(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"trian": {}}"#), Err(HingeError::Config(_))));
        assert!(RunConfig::from_json(r#"{"compress": {"alpha": 0.1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).is_ok());
    }

    #[test]
    fn inconsistent_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"distill": {"balance": 1.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"data": {"classes": 6}, "arch": {"input": {"channels": 3, "height": 16, "width": 16}, "blocks": [{"kind": "plain", "out_channels": 4}], "classes": 4}}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig { seed: 7, ..Default::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
}
