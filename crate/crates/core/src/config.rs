//! JSON run configuration shared by all commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::AblationConfig;
use crate::corpus::CorpusConfig;
use crate::error::{config_err, Error, Result};
use crate::features::{FEATURE_RATE_HZ, MOTION_FPS};
use crate::flame::MIN_VERTICES;
use crate::numerics::Adam;
use crate::pipeline::{SamplerConfig, SieConfig};
use crate::train::TrainConfig;
use crate::vqvae::VqConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Rates {
    pub feature_hz: u32,
    pub motion_fps: u32,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            feature_hz: FEATURE_RATE_HZ,
            motion_fps: MOTION_FPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendshapeConfig {
    pub seed: u64,
    pub vertices: usize,
}

impl Default for BlendshapeConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            vertices: 300,
        }
    }
}

/// Fallback locations used when a command is not given the path as a flag.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub vqvae: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub rates: Rates,
    pub corpus: CorpusConfig,
    pub blendshape: BlendshapeConfig,
    pub vqvae: VqConfig,
    pub encoder: SieConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub sampler: SamplerConfig,
    pub ablation: AblationConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rates: Rates::default(),
            corpus: CorpusConfig::default(),
            blendshape: BlendshapeConfig::default(),
            vqvae: VqConfig::default(),
            encoder: SieConfig::default(),
            stage1: TrainConfig {
                optimizer: Adam::adamw(1e-4),
                seed: 1,
                ..TrainConfig::default()
            },
            stage2: TrainConfig {
                optimizer: Adam::adam(1e-5),
                seed: 2,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
            ablation: AblationConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rates != Rates::default() {
            return Err(config_err!(
                "rates are fixed at {FEATURE_RATE_HZ} Hz features and {MOTION_FPS} fps motion"
            ));
        }
        if self.blendshape.vertices < MIN_VERTICES {
            return Err(config_err!("blendshape.vertices must be at least {MIN_VERTICES}"));
        }
        self.corpus.validate()?;
        self.vqvae.validate()?;
        self.encoder.validate()?;
        for sie in [&self.encoder, &self.ablation.sie] {
            if sie.feature_dim != self.corpus.feature_dim {
                return Err(config_err!(
                    "encoder feature_dim {} differs from corpus feature_dim {}",
                    sie.feature_dim,
                    self.corpus.feature_dim
                ));
            }
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.sampler.validate()?;
        self.ablation.validate()
    }

    /// Parses and validates. Syntax errors keep serde's line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
        assert_eq!(cfg.stage1.optimizer.lr, 1e-4);
        assert_eq!(cfg.stage2.optimizer.lr, 1e-5);
        assert_eq!(cfg.stage1.patience, 5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"vqvae": {"channels": 32, "chanels": 3}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"corpus": {"feature_dim": 16}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"rates": {"motion_fps": 30}}"#),
            Err(Error::Config(_))
        ));
        match RunConfig::from_json("{\n  \"seed\": ,\n}") {
            Err(Error::Config(m)) => assert!(m.contains("line 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
