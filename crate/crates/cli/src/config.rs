use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use jdd_core::degrade::NoiseKind;
use jdd_core::finetune::FinetuneConfig;
use jdd_core::net::NetConfig;
use jdd_core::train::{OverfitConfig, TrainConfig};
use jdd_core::Phase;

use crate::CliError;

/// Everything a run reads from its TOML file. Missing keys take defaults,
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub degrade: DegradeConfig,
    pub data: DataConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub overfit: OverfitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeConfig {
    pub noise: NoiseKind,
    pub seed: u64,
    pub phase: Phase,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            noise: NoiseKind::GaussianIid { sigma: 10.0 / 255.0 },
            seed: 0,
            phase: Phase::Rggb,
        }
    }
}

/// Training and validation images. Directories of PNGs when given,
/// otherwise the procedural generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub procedural_train: usize,
    pub procedural_val: usize,
    pub procedural_size: usize,
    /// Validation images use `procedural_seed + 1`.
    pub procedural_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            val_dir: None,
            procedural_train: 200,
            procedural_val: 20,
            procedural_size: 64,
            procedural_seed: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        Ok(cfg)
    }

    /// Checks every section, so that bad values fail before any work.
    pub fn validate(&self) -> Result<(), CliError> {
        self.degrade.noise.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.overfit.net.validate()?;
        self.overfit.noise.kind.validate()?;
        let d = &self.data;
        if d.procedural_size < 2 || !d.procedural_size.is_multiple_of(2) {
            return Err(CliError::Config(format!(
                "data.procedural_size must be even and >= 2, got {}",
                d.procedural_size
            )));
        }
        if d.train_dir.is_none() && d.procedural_train == 0 {
            return Err(CliError::Config("data.procedural_train must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot print configuration: {e}")))
    }
}
