//! Run configuration: one JSON file describing the architecture and both
//! training phases.
//!
//! Every key is optional, at the top level and inside each section; absent
//! keys take the documented defaults, which describe the base-scale model
//! (16 blocks of width 128) and its training recipes. Unknown keys are
//! rejected anywhere in the file, so a typo aborts the run instead of
//! silently training with a default in its place.
//!
//! An empty file body `{}` is therefore a complete, valid configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::finetune::FinetuneConfig;
use crate::network::NetworkConfig;
use crate::pretrain::PretrainConfig;

/// Everything a training or evaluation run needs besides data paths:
/// the architecture plus the pretraining and finetuning recipes. Each
/// recipe carries its own seed; the `MOTIONLIFT_SEED` environment variable
/// (handled by the command-line layer) overrides both at once.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    /// Cross-checks the sections after parsing; serde has already rejected
    /// unknown keys and malformed values by the time this runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.network.validate().map_err(|e| invalid(e.to_string()))?;
        self.pretrain.validate().map_err(|e| invalid(e.to_string()))?;
        self.finetune.validate().map_err(|e| invalid(e.to_string()))?;
        if self.pretrain.target_layers > self.network.layers {
            return Err(ConfigError::Invalid(format!(
                "pretrain.target_layers ({}) exceeds network.layers ({})",
                self.pretrain.target_layers, self.network.layers
            )));
        }
        Ok(())
    }

    /// Forces one seed onto both training phases.
    pub fn override_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }
}

/// Parses and validates a configuration from JSON text.
pub fn parse_run_config(text: &str) -> Result<RunConfig, ConfigError> {
    let config: RunConfig =
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Reads, parses, and validates a configuration file.
pub fn load_run_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_run_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default_config() {
        let config = parse_run_config("{}").unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.network.dim, 128);
        assert_eq!(config.network.layers, 16);
        assert_eq!(config.pretrain.mask_prob, 0.8);
        assert_eq!(config.finetune.lambda1, 0.5);
        assert_eq!(config.finetune.lambda2, 20.0);
    }

    #[test]
    fn partial_sections_fill_from_defaults() {
        let config = parse_run_config(
            r#"{"network": {"dim": 256}, "finetune": {"lambda1": 0.0, "lambda2": 0.0}}"#,
        )
        .unwrap();
        assert_eq!(config.network.dim, 256);
        assert_eq!(config.network.heads, 8);
        assert_eq!(config.finetune.lambda1, 0.0);
        assert_eq!(config.finetune.epochs, 10);
        assert_eq!(config.pretrain, PretrainConfig::default());
    }

    #[test]
    fn unknown_top_level_key_is_rejected_by_name() {
        let err = parse_run_config(r#"{"networks": {}}"#).unwrap_err();
        let ConfigError::Parse(msg) = err else {
            panic!("expected Parse, got {err:?}");
        };
        assert!(msg.contains("networks"), "{msg}");
    }

    #[test]
    fn unknown_nested_key_is_rejected_by_name() {
        let err = parse_run_config(r#"{"network": {"dims": 64}}"#).unwrap_err();
        let ConfigError::Parse(msg) = err else {
            panic!("expected Parse, got {err:?}");
        };
        assert!(msg.contains("dims"), "{msg}");

        let err = parse_run_config(r#"{"pretrain": {"mask_probability": 0.5}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn invalid_values_are_rejected_after_parsing() {
        let err = parse_run_config(r#"{"network": {"heads": 3}}"#).unwrap_err();
        let ConfigError::Invalid(msg) = err else {
            panic!("expected Invalid, got {err:?}");
        };
        assert!(msg.contains("divide"), "{msg}");

        let err = parse_run_config(r#"{"finetune": {"lr": -1.0}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));

        // Sections may be individually fine yet inconsistent together.
        let err =
            parse_run_config(r#"{"network": {"layers": 2}, "pretrain": {"target_layers": 8}}"#)
                .unwrap_err();
        let ConfigError::Invalid(msg) = err else {
            panic!("expected Invalid, got {err:?}");
        };
        assert!(msg.contains("target_layers"), "{msg}");
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(
            parse_run_config("{"),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_run_config(&dir.path().join("absent.json")).unwrap_err();
        assert!(matches!(err, ConfigError::Io { .. }));
    }

    #[test]
    fn file_round_trip_preserves_the_config() {
        let mut config = RunConfig::default();
        config.network.dim = 64;
        config.network.action_classes = Some(4);
        config.pretrain.mask_prob = 0.6;
        config.finetune.task = crate::finetune::TaskKind::Action;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        assert_eq!(load_run_config(&path).unwrap(), config);
    }

    #[test]
    fn seed_override_hits_both_phases() {
        let mut config = RunConfig::default();
        config.pretrain.seed = 1;
        config.finetune.seed = 2;
        config.override_seed(99);
        assert_eq!(config.pretrain.seed, 99);
        assert_eq!(config.finetune.seed, 99);
    }
}
