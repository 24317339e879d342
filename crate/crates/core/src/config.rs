//! Run configuration: one TOML document with a section per module. Every
//! field has a default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapipe::{Normalization, PrepareOptions};
use crate::fiberquant::MaskThresholds;
use crate::network::{ModelConfig, Preset};
use crate::tensor::OptimizerKind;
use crate::trainer::HyperParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Split, initialisation, head surgery and shuffling derive
    /// from it.
    pub seed: u64,
    pub paths: Paths,
    pub model: ModelSettings,
    pub data: DataSettings,
    pub train: TrainSettings,
    pub explain: ExplainSettings,
    pub fiberquant: FiberSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the input `manifest.csv` (synth writes here).
    pub data_root: PathBuf,
    /// Every subcommand writes below this directory.
    pub output_root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub preset: Preset,
    pub input_size: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Train/validation/test ratio.
    pub ratios: [u32; 3],
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze_blocks: usize,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSettings {
    /// Layer index whose output is explained; `None` picks the ReLU after the
    /// last convolution.
    pub layer: Option<usize>,
    /// Explained class; `None` explains the predicted class.
    pub class: Option<usize>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiberSettings {
    pub thresholds: MaskThresholds,
    /// Gaussian window of the structure tensor, in pixels.
    pub sigma: f64,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_root: PathBuf::from("data"),
            output_root: PathBuf::from("out"),
        }
    }
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            preset: Preset::VggTiny,
            input_size: Preset::VggTiny.default_input_size(),
            num_classes: 6,
        }
    }
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            ratios: PrepareOptions::default().ratios,
            normalization: Normalization::default(),
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        let hp = HyperParams::default();
        TrainSettings {
            learning_rate: hp.learning_rate,
            epochs: hp.epochs,
            batch_size: hp.batch_size,
            freeze_blocks: hp.freeze_blocks,
            optimizer: hp.optimizer,
        }
    }
}

impl Default for ExplainSettings {
    fn default() -> Self {
        ExplainSettings {
            layer: None,
            class: None,
            alpha: 0.5,
        }
    }
}

impl Default for FiberSettings {
    fn default() -> Self {
        FiberSettings {
            thresholds: MaskThresholds::default(),
            sigma: 2.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, why: &str| Err(ConfigError::Invalid(format!("{key}: {why}")));
        if self.model.input_size == 0 {
            return bad("model.input_size", "must be positive");
        }
        if self.model.num_classes == 0 {
            return bad("model.num_classes", "must be positive");
        }
        if self.data.ratios.contains(&0) {
            return bad("data.ratios", "every ratio must be positive");
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return bad("train.learning_rate", "must be positive and finite");
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.explain.alpha) {
            return bad("explain.alpha", "must lie in [0, 1]");
        }
        if !(self.fiberquant.sigma > 0.0 && self.fiberquant.sigma.is_finite()) {
            return bad("fiberquant.sigma", "must be positive and finite");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.model.preset, self.model.num_classes)
            .with_input_size(self.model.input_size)
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            input_size: self.model.input_size as u32,
            ratios: self.data.ratios,
            seed: self.seed,
        }
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            freeze_blocks: self.train.freeze_blocks,
            optimizer: self.train.optimizer,
        }
    }

    /// Seed of a freshly initialised model or classifier head.
    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}
