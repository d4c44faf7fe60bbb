//! Experiment configuration: strict JSON schema, one master seed, all
//! hyperparameters explicit. A run is reproducible from (config, seed).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::OptimizerConfig;
use crate::nn::ModelConfig;
use crate::routing::RoutingConfig;

use super::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Corpus spec used to generate `corpus_dir` (provenance; optional).
    #[serde(default)]
    pub corpus_spec: Option<PathBuf>,
    /// Directory holding the generated corpus splits.
    pub corpus_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub routing: RoutingConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Config(format!("serialize config: {e}")))?;
        fs::write(path, text + "\n")
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_field_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(
            &path,
            r#"{"corpus_dir": "c", "seed": 1, "out_dir": "o", "learning_rate_typo": 0.1}"#,
        )
        .unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("learning_rate_typo"), "{err}");
    }

    #[test]
    fn roundtrip_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"corpus_dir": "c", "seed": 7, "out_dir": "o"}"#).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.optimizer.lr, 2e-5);
        assert_eq!(cfg.model.d_model, 64);
        cfg.save(&dir.path().join("out.json")).unwrap();
        let again = ExperimentConfig::load(&dir.path().join("out.json")).unwrap();
        assert_eq!(again.optimizer, cfg.optimizer);
    }
}
