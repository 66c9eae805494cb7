//! Whole-run configuration, read from TOML.

use crate::backbone::BackboneConfig;
use crate::data::{self, DataConfig};
use crate::error::{Error, Result};
use crate::losses::{FineAnnotationCoeffs, LossWeights};
use crate::prototype::PrototypeConfig;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub prototypes: PrototypeConfig,
    pub loss: LossWeights,
    pub fine_annotation: FineAnnotationCoeffs,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.prototypes.validate(&self.backbone)?;
        self.loss.validate()?;
        self.fine_annotation.validate()?;
        self.train.validate()?;
        if self.data.image_size != self.backbone.input_size {
            return Err(Error::config(
                "data.image_size",
                format!(
                    "{} does not match backbone.input_size {}",
                    self.data.image_size, self.backbone.input_size
                ),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(field, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        data::config_hash(self)
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}
