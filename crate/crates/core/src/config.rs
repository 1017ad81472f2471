//! Run configuration: one TOML file with `[model]`, `[halting]`, `[train]`
//! and `[data]` tables. Every key is optional and unknown keys are errors.
//!
//! ```toml
//! [model]
//! image_size = 32
//! num_layers = 6
//!
//! [halting]
//! target_depth = 4.0
//!
//! [train]
//! pipeline = "two-phase"
//! pretrain_epochs = 20
//! epochs = 10
//!
//! [data]
//! source = "cifar10"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, ShapesConfig};
use crate::error::{Error, Result};
use crate::halting::HaltingConfig;
use crate::train::TrainConfig;
use crate::vit::ModelConfig;

/// Environment variable naming the dataset root when `data.root` is unset.
pub const DATA_ENV: &str = "TOKENHALT_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Cifar10,
    Mnist,
    /// Procedural glyph images; needs no files.
    Shapes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the dataset files.
    pub root: Option<PathBuf>,
    /// Keep only the first N training samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub shapes_train: usize,
    pub shapes_test: usize,
    pub shapes_glyph: usize,
    pub shapes_noise: [f32; 2],
    pub shapes_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = ShapesConfig::default();
        Self {
            source: DataSource::Cifar10,
            root: None,
            train_limit: None,
            test_limit: None,
            shapes_train: s.train,
            shapes_test: s.test,
            shapes_glyph: s.glyph,
            shapes_noise: [s.noise.0, s.noise.1],
            shapes_seed: s.seed,
        }
    }
}

impl DataConfig {
    /// The explicit root, else the environment variable.
    pub fn resolve_root(&self) -> Result<PathBuf> {
        if let Some(r) = &self.root {
            return Ok(r.clone());
        }
        match std::env::var_os(DATA_ENV) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(Error::Config(format!("no dataset root: set data.root or {DATA_ENV}"))),
        }
    }

    pub fn shapes(&self, model: &ModelConfig) -> ShapesConfig {
        ShapesConfig {
            side: model.image_size,
            channels: model.channels,
            glyph: self.shapes_glyph,
            train: self.shapes_train,
            test: self.shapes_test,
            noise: (self.shapes_noise[0], self.shapes_noise[1]),
            seed: self.shapes_seed,
        }
    }

    /// Loads train and test splits shaped for `model`.
    pub fn load(&self, model: &ModelConfig) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.source {
            DataSource::Cifar10 => data::load_cifar10(&self.resolve_root()?)?,
            DataSource::Mnist => data::load_mnist_idx(&self.resolve_root()?, model.image_size)?,
            DataSource::Shapes => data::synthetic_shapes(&self.shapes(model))?,
        };
        if train.channels != model.channels || train.side != model.image_size {
            return Err(Error::Config(format!(
                "dataset images are {}x{}x{} but the model expects {}x{}x{}",
                train.channels, train.side, train.side, model.channels, model.image_size, model.image_size
            )));
        }
        let train = self.train_limit.map_or(train.clone(), |n| train.take(n));
        let test = self.test_limit.map_or(test.clone(), |n| test.take(n));
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub halting: HaltingConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.halting.validate(&self.model)?;
        self.train.validate()
    }
}
