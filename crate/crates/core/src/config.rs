//! Run profiles: one TOML file covering data, queries, encoder and training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::EncoderConfig;
use crate::perturb::SplitCounts;
use crate::storage::atomic_write;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `synthetic` or a CSV path.
    pub bases: String,
    /// Synthetic base count; `0` draws one base per pair.
    pub n_bases: usize,
    pub length: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            bases: "synthetic".into(),
            n_bases: 0,
            length: 256,
            train: 4000,
            val: 240,
            test: 400,
        }
    }
}

impl DataConfig {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    pub per_label: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { per_label: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Profile {
    pub seed: u64,
    pub data: DataConfig,
    pub queries: QueryConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for Profile {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            queries: QueryConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Profile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Propagate shared values (seed, series length, freeze flag) and validate.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.encoder.series_length = self.data.length;
        let freeze = self.encoder.freeze_text_encoder || self.train.freeze_text_encoder;
        self.encoder.freeze_text_encoder = freeze;
        self.train.freeze_text_encoder = freeze;
        self.encoder.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    /// Record the resolved profile next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        atomic_write(
            &dir.join("resolved-config.toml"),
            self.to_toml()?.as_bytes(),
        )
    }
}
