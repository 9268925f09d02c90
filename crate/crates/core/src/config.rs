//! Experiment configuration as a strict JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SceneConfig, SemiDataset};
use crate::error::{Error, Result};
use crate::nn::{ModelDims, ModelParams, NetworkSpecs};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Labeled training pairs.
    pub n: usize,
    /// Unlabeled training images.
    pub m: usize,
    /// Labeled test records.
    pub t: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { n: 200, m: 5000, t: 500 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub z_dim: usize,
    pub hidden_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { z_dim: 8, hidden_width: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: SceneConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        if self.split.t == 0 {
            return Err(Error::Config("split.t must be at least 1".into()));
        }
        if self.model.z_dim == 0 || self.model.hidden_width == 0 {
            return Err(Error::Config("model.z_dim and model.hidden_width must be positive".into()));
        }
        Ok(())
    }

    /// Image and label widths follow from the scene; the latent width is configured.
    pub fn dims(&self) -> ModelDims {
        ModelDims { d_dim: self.scene.d_dim(), h_dim: self.scene.h_dim(), z_dim: self.model.z_dim }
    }

    pub fn specs(&self) -> NetworkSpecs {
        NetworkSpecs::standard(self.dims(), self.model.hidden_width, self.scene.depth_mode)
    }

    /// Initial parameters, seeded by the training seed.
    pub fn init_params(&self) -> Result<ModelParams> {
        ModelParams::init(self.dims(), self.specs(), self.train.seed)
    }

    pub fn dataset(&self) -> Result<SemiDataset> {
        SemiDataset::synthesize(&self.scene, self.split.n, self.split.m, self.split.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_and_partial_documents() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = ExperimentConfig::from_json(r#"{"split": {"n": 3, "m": 0, "t": 2}, "train": {"mode": "full"}}"#).unwrap();
        assert_eq!(partial.split.n, 3);
        assert_eq!(partial.train.batch_size, 32);
        assert_eq!(partial.dims(), ModelDims { d_dim: 256, h_dim: 8, z_dim: 8 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [r#"{"bogus": 1}"#, r#"{"train": {"lr": 0.1}}"#, r#"{"scene": {"side": 8}}"#] {
            assert!(matches!(ExperimentConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"train": {"momentum": 1.5}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"model": {"z_dim": 0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"split": {"n": 1, "m": 1, "t": 0}}"#).is_err());
    }
}
