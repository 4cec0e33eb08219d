//! Experiment configuration as TOML text.
//!
//! ```toml
//! seed = 0
//! dataset = "data/synth.bin"
//! out_dir = "runs/mff"
//!
//! [model]
//! image_size = 32
//! ...
//! [model.mff]
//! layers = [0, 1, 2, 3, 4, 5]
//!
//! [train]
//! batch_size = 64
//! ...
//! ```
//!
//! Unknown keys are rejected. The canonical text is the TOML serialisation
//! of the parsed config; its SHA-256 is the config hash.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TargetMode};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    /// Checkpoint whose model parameters become the frozen teacher. Without
    /// one the teacher is a random initialisation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherConfig>,
}


/// Pulls the offending key out of a deserialiser message such as
/// "unknown field `foo`, expected ...".
fn offending_key(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = offending_key(&msg).unwrap_or_else(|| "config".into());
            Error::Config { key, msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.teacher.as_ref().is_some_and(|t| t.checkpoint.is_some())
            && self.model.target_mode != TargetMode::FeatureRegression
        {
            return Err(Error::config(
                "teacher.checkpoint",
                "only used with target_mode = \"feature_regression\"",
            ));
        }
        Ok(())
    }

    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }
}
