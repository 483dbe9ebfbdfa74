//! One structured document configures a whole run; unknown keys are
//! rejected so a config file cannot silently misspell a field.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iar::IarConfig;
use crate::scene::SceneConfig;
use crate::segnet::BackboneConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub backbone: BackboneConfig,
    pub iar: IarConfig,
    pub train: TrainConfig,
    /// Scene counts for gen-data.
    pub train_scenes: usize,
    pub test_scenes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let backbone = BackboneConfig {
            num_classes: scene.num_classes,
            ..BackboneConfig::default()
        };
        RunConfig {
            seed: 0,
            scene,
            backbone,
            iar: IarConfig::default(),
            train: TrainConfig::default(),
            train_scenes: 40,
            test_scenes: 10,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.backbone.validate()?;
        self.iar.validate()?;
        self.train.validate()?;
        if self.backbone.num_classes != self.scene.num_classes {
            return Err(Error::Config(format!(
                "backbone num_classes {} != scene num_classes {}",
                self.backbone.num_classes, self.scene.num_classes
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            offset: e.span().map(|s| s.start).unwrap_or(0),
            detail: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_toml(&text, "mem").unwrap();
        assert_eq!(back.train.lr0, 5e-4);
        assert_eq!(back.train.lambda_rend, 0.1);
        assert_eq!(back.train.alpha, 0.7);
        assert_eq!(back.iar.pe_len, 128);
        assert_eq!(back.iar.n_points_train, 2048);
        assert_eq!(back.iar.n_points_test, 8192);
        assert_eq!(back.iar.k_candidates, 3);
        assert_eq!(back.iar.rho, 0.75);
        assert_eq!(back.backbone.expert_dim, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("not_a_field = 3\n", "mem").unwrap_err();
        assert!(err.to_string().contains("not_a_field"));
        let err = RunConfig::from_toml("[train]\nlearning = 1.0\n", "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let err = RunConfig::from_toml("[iar]\nrho = 0.4\n", "mem").unwrap_err();
        assert!(err.to_string().contains("rho"));
        let err = RunConfig::from_toml("[train]\nalpha = 1.5\n", "mem").unwrap_err();
        assert!(err.to_string().contains("alpha"));
    }
}
