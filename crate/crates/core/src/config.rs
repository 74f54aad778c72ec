//! JSON run configuration shared by every pipeline command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, ClassifierTrainConfig};
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::trainer::{GeneratorConfig, TrainConfig};

/// Environment variable that replaces every seed of a loaded config.
pub const SEED_ENV: &str = "MCFE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let a = ClassifierConfig::default();
        let t = ClassifierTrainConfig::default();
        Self {
            channels: a.channels,
            kernel: a.kernel,
            lr: t.lr,
            epochs: t.epochs,
            batch: t.batch,
            seed: t.seed,
        }
    }
}

impl ClassifierSection {
    pub fn architecture(&self, image_size: usize, num_classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            image_size,
            in_channels: 1,
            channels: self.channels.clone(),
            kernel: self.kernel,
            num_classes,
        }
    }

    pub fn training(&self) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub model: GeneratorConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub classifier: ClassifierSection,
    pub generator: GeneratorSection,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, applies the seed override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} is not an unsigned integer: {v:?}")))?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.classifier.seed = seed;
        self.generator.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let arch = self.classifier_architecture();
        arch.validate()?;
        if self.classifier.epochs == 0 || self.classifier.batch == 0 || !(self.classifier.lr > 0.0) {
            return Err(Error::Config("classifier: epochs, batch and lr must be positive".into()));
        }
        self.generator.model.validate(&arch)?;
        self.generator.train.validate()?;
        let e = &self.eval;
        let c = self.dataset.classes.len();
        if e.source >= c || e.target >= c || e.source == e.target {
            return Err(Error::Config(format!(
                "eval: pair ({}, {}) invalid for {c} classes",
                e.source, e.target
            )));
        }
        if e.steps < 2 || e.samples == 0 {
            return Err(Error::Config("eval: steps >= 2 and samples >= 1 required".into()));
        }
        crate::eval::gaussian_taps(e.blur.size, e.blur.sigma)
            .map_err(|err| Error::Config(format!("eval: {err}")))?;
        Ok(())
    }

    pub fn classifier_architecture(&self) -> ClassifierConfig {
        self.classifier
            .architecture(self.dataset.image_size, self.dataset.classes.len())
    }
}
