//! Run configuration and its TOML form.
//!
//! A config file is a partial TOML document layered over a named preset:
//! any key it omits keeps the preset value, unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::PreprocessConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the number of optimizer steps; the cosine schedule spans the cap.
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            momentum: 0.9,
            weight_decay: 1e-6,
            batch_size: 4,
            epochs: 20,
            max_steps: None,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    /// Synthetic clips generated when no data directory is given.
    pub train_clips: usize,
    /// Dataset directory written by `gen-data`.
    pub data: Option<PathBuf>,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub metrics: MetricConfig,
    pub optim: OptimConfig,
    /// Epochs between numbered checkpoints; `latest` is written every epoch.
    pub checkpoint_every: usize,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            train_clips: 8,
            data: None,
            preprocess: PreprocessConfig::toy(),
            model: ModelConfig::default(),
            metrics: MetricConfig::default(),
            optim: OptimConfig::default(),
            checkpoint_every: 1,
            output: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Optimizer settings as published: SGD, lr 1e-5, batch 4, 20 epochs.
    Reference,
    /// Settings that train the toy model in minutes on a CPU.
    Toy,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Preset::Reference),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected toy or reference)"))),
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Reference => Self::default(),
            Preset::Toy => Self::toy(),
        }
    }

    pub fn toy() -> Self {
        Self {
            optim: OptimConfig {
                learning_rate: 1e-2,
                batch_size: 4,
                epochs: 150,
                max_steps: Some(300),
                grad_clip: Some(10.0),
                ..OptimConfig::default()
            },
            checkpoint_every: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.preprocess.validate()?;
        self.model.validate()?;
        self.metrics.validate()?;
        let o = &self.optim;
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(o.learning_rate >= 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning_rate and weight_decay must be >= 0, momentum in [0, 1)".into(),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if self.preprocess.frames != self.world.frames && self.data.is_none() {
            log::warn!(
                "sampling {} frames from {}-frame synthetic clips",
                self.preprocess.frames,
                self.world.frames
            );
        }
        Ok(())
    }

    /// Layers a TOML document over `base`.
    pub fn from_toml_over(text: &str, base: &RunConfig) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &RunConfig) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_over(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
