//! TOML experiment configuration.
//!
//! Every section is optional; omitted fields take the library defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive::HyperGrid;
use crate::datagen::{sample_seed, PilotKind, SceneConfig};
use crate::dictionary::DictConfig;
use crate::error::{Error, Result};
use crate::iterative::IterativeConfig;
use crate::sweep::SweepSpec;
use crate::training::TrainConfig;

/// Dataset sizes for the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self { train: 2000, val: 500, test: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jdce", self.name())
    }
}

/// Settings of the `theory` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub scene: SceneConfig,
    pub dict: DictConfig,
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub s: usize,
    /// Noise level; `None` uses half of the admissible maximum.
    pub eps: Option<f64>,
    pub instances: usize,
    /// Layers run past the momentum switch-on point.
    pub extra_layers: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig { n_devices: 40, n_antennas: 4, pilot_len: 32, pilot_kind: PilotKind::ZadoffChu, ..Default::default() },
            dict: DictConfig::default(),
            mu_lo: 1.0,
            mu_hi: 2.0,
            s: 3,
            eps: None,
            instances: 100,
            extra_layers: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; each split draws from its own derived stream.
    pub seed: u64,
    pub scene: SceneConfig,
    pub sizes: Sizes,
    pub layers: usize,
    pub dict: DictConfig,
    pub train: TrainConfig,
    pub iterative: IterativeConfig,
    pub grid: HyperGrid,
    pub sweep: Option<SweepSpec>,
    pub theory: TheoryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            sizes: Sizes::default(),
            layers: 16,
            dict: DictConfig::default(),
            train: TrainConfig::default(),
            iterative: IterativeConfig::default(),
            grid: HyperGrid::default(),
            sweep: None,
            theory: TheoryConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("missing file {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.theory.scene.validate()?;
        self.train.validate()?;
        if self.layers == 0 {
            return Err(Error::Config("layers must be positive".into()));
        }
        if self.sizes.train == 0 || self.sizes.val == 0 || self.sizes.test == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if let Some(spec) = &self.sweep {
            spec.validate()?;
        }
        Ok(())
    }

    /// Master seed of a split.
    pub fn split_seed(&self, split: Split) -> u64 {
        let stream = match split {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        };
        sample_seed(self.seed, stream)
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.sizes.train,
            Split::Val => self.sizes.val,
            Split::Test => self.sizes.test,
        }
    }
}
