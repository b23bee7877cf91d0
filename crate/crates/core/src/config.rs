//! JSON run configuration shared by every CLI command.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::datagen::{default_classes, DatasetManifest};
use crate::embedview::TsneConfig;
use crate::losses::LossConfig;
use crate::mask23d::{Mask23DConfig, RenderConfig};
use crate::sketch2mask::UNetConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

/// Dataset generation parameters (the dataset seed comes from the global
/// run seed).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub splits: [f64; 3],
    pub resolution: usize,
    pub allow_empty: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 320,
            splits: [0.8, 0.1, 0.1],
            resolution: 64,
            allow_empty: false,
        }
    }
}

impl DataConfig {
    pub fn to_manifest(self, seed: u64) -> DatasetManifest {
        DatasetManifest {
            count: self.count,
            seed,
            splits: self.splits,
            classes: default_classes(),
            resolution: self.resolution,
            allow_empty: self.allow_empty,
        }
    }
}

/// Full run configuration; every section falls back to the desk-scale
/// defaults, and unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub unet: UNetConfig,
    pub teacher: Mask23DConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub render: RenderConfig,
    pub tsne: TsneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            unet: UNetConfig::desk_default(),
            teacher: Mask23DConfig::desk_default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentPolicy::default(),
            render: RenderConfig::default(),
            tsne: TsneConfig::default(),
        }
    }
}

impl RunConfig {
    /// Re-validates every section and their cross-module agreements.
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.teacher.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.render.validate()?;
        self.data.to_manifest(self.seed).validate()?;
        if self.data.resolution != self.unet.input_size {
            return Err(Error::Config(format!(
                "data resolution {} != network input size {}",
                self.data.resolution, self.unet.input_size
            )));
        }
        if self.teacher.mask_resolution != self.unet.input_size {
            return Err(Error::Config(format!(
                "teacher resolution {} != network input size {}",
                self.teacher.mask_resolution, self.unet.input_size
            )));
        }
        if self.teacher.num_classes != self.unet.num_classes {
            return Err(Error::Config("teacher/network class count mismatch".into()));
        }
        if self.teacher.num_classes != default_classes().len() {
            return Err(Error::Config(format!(
                "class count {} != dataset classes {}",
                self.teacher.num_classes,
                default_classes().len()
            )));
        }
        if (self.teacher.style_rows, self.teacher.style_dim)
            != (self.unet.style_rows, self.unet.style_dim)
        {
            return Err(Error::Config(
                "teacher/network style vector shape mismatch".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        // a bad --config path is a usage error, not a runtime failure
        let bytes = fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>(r#"{"loss": {"lambda_xx": 1.0}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.unet.input_size, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn cross_section_mismatch_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.resolution = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.teacher.style_dim = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
