//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory the dataset is generated into and read from.
    pub root: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub sequences: usize,
    #[serde(default)]
    pub scene: SceneConfig,
}

/// Everything needed to reproduce one experiment. Unknown keys anywhere are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.scene.validate()?;
        let scene = &self.data.scene;
        if self.model.input_size != (scene.height, scene.width) {
            return Err(Error::param(format!(
                "model.input_size {:?} differs from data.scene size ({}, {})",
                self.model.input_size, scene.height, scene.width
            )));
        }
        if self.model.num_classes != scene.num_classes {
            return Err(Error::param(format!(
                "model.num_classes {} differs from data.scene.num_classes {}",
                self.model.num_classes, scene.num_classes
            )));
        }
        if self.model.order > scene.sequence_length {
            return Err(Error::param(format!(
                "model order {} exceeds data.scene.sequence_length {}",
                self.model.order, scene.sequence_length
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"kind": "MSFCN", "order": 3, "num_classes": 4, "input_size": [64, 96]},
        "data": {"root": "data", "sequences": 30, "scene": {"camouflage": true}},
        "output_dir": "runs/msfcn3"
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.model.label(), "MSFCN-3");
        assert_eq!(cfg.train, TrainConfig::default());
        assert!(cfg.data.scene.camouflage);
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for (from, to) in [
            ("\"output_dir\"", "\"outptu_dir\": 1, \"output_dir\""),
            ("\"order\"", "\"ordr\": 1, \"order\""),
            ("\"camouflage\"", "\"camo\": 1, \"camouflage\""),
            ("\"sequences\"", "\"seqs\": 1, \"sequences\""),
        ] {
            let text = MINIMAL.replacen(from, to, 1);
            let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
            assert!(err.contains("unknown field"), "{err}");
        }
    }

    #[test]
    fn inconsistent_sections_are_rejected() {
        let text = MINIMAL.replace("[64, 96]", "[64, 64]");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Parameter(_))));
        let text = MINIMAL.replace("\"camouflage\": true", "\"height\": 50");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("multiple of 32"), "{err}");
    }
}
