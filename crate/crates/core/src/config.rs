//! Key-value configuration files (TOML syntax).
//!
//! ```toml
//! [model]
//! preset = "toy"            # "toy" or "full"
//!
//! [train]
//! lambda = 2048.0
//! epsilon = 4.0
//! metric = "mse"            # "mse" or "msssim"
//! lr = 1e-4
//! batch = 8
//! epochs = [5, 5, 5, 25]
//! crop = 256
//!
//! [codec]
//! gop_size = 8
//! lambda_index = 3
//! metric = "mse"
//! ```
//!
//! Every key is optional and falls back to its default. Unknown keys are
//! rejected so typos do not pass silently. Command-line flags override
//! file values.

use std::path::Path;

use serde::Deserialize;

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::metrics::QualityMetric;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        match self.preset {
            Preset::Toy => ModelConfig::toy(),
            Preset::Full => ModelConfig::full(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub gop_size: usize,
    pub lambda_index: u8,
    pub metric: QualityMetric,
}

impl Default for CodecSection {
    fn default() -> Self {
        let c = CodecConfig::default();
        CodecSection {
            gop_size: c.gop_size,
            lambda_index: c.lambda_index,
            metric: c.metric,
        }
    }
}

impl From<CodecSection> for CodecConfig {
    fn from(s: CodecSection) -> Self {
        CodecConfig {
            gop_size: s.gop_size,
            lambda_index: s.lambda_index,
            metric: s.metric,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub codec: CodecSection,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
