use std::path::{Path, PathBuf};

use hydra_core::attack::AttackConfig;
use hydra_core::detector::DetectorConfig;
use hydra_core::eval::EvalConfig;
use hydra_core::scene::SceneConfig;
use hydra_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// Everything one experiment needs. Every field is required so the file on disk is the
/// complete record of the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Dataset generation seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// View whose placements the single-view baseline optimizes.
    pub baseline_view: usize,
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_VERSION,
            seed: 1,
            output_dir: PathBuf::from("runs"),
            baseline_view: 0,
            scene: SceneConfig::default(),
            detector: DetectorConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.message().to_string()))?;
        if cfg.schema_version != CONFIG_VERSION {
            return Err(Error::SchemaMismatch(format!("config schema_version {} (expected {CONFIG_VERSION})", cfg.schema_version)));
        }
        cfg.scene.validate()?;
        cfg.detector.validate()?;
        cfg.attack.validate()?;
        if cfg.baseline_view >= cfg.scene.num_views {
            return Err(Error::ConfigInvalid(format!("baseline_view {} >= num_views {}", cfg.baseline_view, cfg.scene.num_views)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_config_matches_defaults() {
        let text = include_str!("../../../configs/default.toml");
        assert_eq!(ExperimentConfig::parse(text).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn default_dataset_size() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.scene.total_frames(), 240);
        assert_eq!((cfg.scene.train_frames, cfg.scene.test_frames), (200, 40));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn missing_field_is_named() {
        let text = ExperimentConfig::default().to_toml().replace("focal = 110.0\n", "");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(matches!(&err, Error::ConfigInvalid(m) if m.contains("focal")), "{err}");
    }

    #[test]
    fn unknown_field_and_version_are_rejected() {
        let text = ExperimentConfig::default().to_toml().replace("seed = 1\n", "seed = 1\nsed = 2\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::ConfigInvalid(_))));
        let text = ExperimentConfig::default().to_toml().replace("schema_version = 1", "schema_version = 2");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::SchemaMismatch(_))));
    }
}
