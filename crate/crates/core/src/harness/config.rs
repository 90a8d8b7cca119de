//! Experiment configuration: a sectioned `key = value` file.
//!
//! ```toml
//! [experiment]
//! dataset = "mnist"
//! ood_datasets = ["fashionmnist"]
//! latent_dim = 16
//! backbone = "smallconv"
//! seed = 0
//! output_dir = "runs/ccib-seed0"
//!
//! [channel]
//! psnr_db = 20.0
//! peak_power = 1.0
//! symbol_rate = 9600.0
//!
//! [train]
//! objective = "ccib"
//! beta = 0.01
//! margin = 0.2
//! mc_samples = 1
//! batch_size = 128
//! epochs = 10
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::codec::BackboneId;
use crate::error::{Error, Result};
use crate::objectives::TrainConfig;
use crate::ood::DetectionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(&self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub dataset: String,
    #[serde(default)]
    pub ood_datasets: Vec<String>,
    pub latent_dim: usize,
    #[serde(default = "default_backbone")]
    pub backbone: BackboneId,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
}

fn default_backbone() -> BackboneId {
    BackboneId::SmallConv
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

/// Subset sizes; `None` uses the whole split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub ood_limit: Option<usize>,
}

/// How the λ threshold is chosen when the config does not fix it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    /// Fraction of in-distribution training samples that must be accepted.
    pub target_tpr: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { target_tpr: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub data: DataSection,
    pub channel: ChannelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub detect: DetectionConfig,
    #[serde(default)]
    pub calibration: CalibrationSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative `output_dir` and `data_dir`
    /// are kept relative to the working directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.latent_dim == 0 {
            return Err(Error::Config("experiment.latent_dim must be positive".into()));
        }
        if e.dataset.is_empty() {
            return Err(Error::Config("experiment.dataset must be set".into()));
        }
        if e.ood_datasets.iter().any(|d| d == &e.dataset) {
            return Err(Error::Config("an OoD dataset cannot equal the ID dataset".into()));
        }
        if matches!(self.data.train_limit, Some(n) if n < 2)
            || matches!(self.data.test_limit, Some(0))
            || matches!(self.data.ood_limit, Some(0))
        {
            return Err(Error::Config("data limits must be positive (train_limit >= 2)".into()));
        }
        let t = self.calibration.target_tpr;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("calibration.target_tpr must be in (0, 1], got {t}")));
        }
        self.train.validate()?;
        self.detect.validate()?;
        Ok(())
    }

    /// Canonical serialized form, written beside every run.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the canonical form, with the
    /// output and data locations blanked.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.experiment.output_dir = PathBuf::new();
        c.experiment.data_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }

    pub fn output_dir(&self) -> &Path {
        &self.experiment.output_dir
    }

    pub fn data_dir(&self) -> &Path {
        &self.experiment.data_dir
    }
}
