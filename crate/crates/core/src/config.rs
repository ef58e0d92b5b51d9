//! Training configuration, read from flat `key = value` files whose dotted
//! keys address sub-configs, e.g. `ddl.alpha = 0.3` or `ema.zeta = 0.99`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::DbscanConfig;
use crate::data::SynthConfig;
use crate::ddl::DdlConfig;
use crate::ema::EmaConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    /// Pseudo-classes per batch.
    pub batch_p: usize,
    /// Samples per pseudo-class.
    pub batch_k: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Padding used by the random crop.
    pub augment_pad: usize,
    /// Apply the label losses to both views; otherwise only the first view.
    pub shared_labels: bool,
    /// Train on true identities with the classification loss only.
    pub supervised: bool,
    /// Evaluate every this many epochs (0: only after training).
    pub eval_every: usize,
    /// Evaluate and cluster with the teacher rather than the student.
    pub eval_teacher: bool,
    /// Dataset directory; the synthetic generator is used when absent.
    pub data_dir: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    /// Where logs, label dumps and the final checkpoint go.
    pub output_dir: Option<PathBuf>,
    /// Write one pseudo-label CSV per epoch into `output_dir`.
    pub dump_labels: bool,
    pub adam: AdamConfig,
    pub ddl: DdlConfig,
    pub ema: EmaConfig,
    pub loss: LossWeights,
    pub dbscan: DbscanConfig,
    pub encoder: EncoderConfig,
    pub data: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            iters_per_epoch: 30,
            batch_p: 4,
            batch_k: 4,
            learning_rate: 3.5e-4,
            weight_decay: 5e-4,
            seed: 0,
            augment_pad: 2,
            shared_labels: true,
            supervised: false,
            eval_every: 0,
            eval_teacher: true,
            data_dir: None,
            init_checkpoint: None,
            output_dir: None,
            dump_labels: false,
            adam: AdamConfig::default(),
            ddl: DdlConfig::default(),
            ema: EmaConfig::default(),
            loss: LossWeights::default(),
            dbscan: DbscanConfig::default(),
            encoder: EncoderConfig::default(),
            data: SynthConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text)
    }

    /// Rendered as a flat key-value file that [`TrainConfig::from_str`] reads back.
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.iters_per_epoch < 1 {
            return Err(Error::Config("epochs and iters_per_epoch must be at least 1".into()));
        }
        if self.batch_p < 1 || self.batch_k < 1 {
            return Err(Error::Config("batch_p and batch_k must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        self.adam.validate()?;
        self.ddl.validate()?;
        self.ema.validate()?;
        self.loss.validate()?;
        self.dbscan.validate()?;
        self.encoder.validate()?;
        if self.data_dir.is_none() {
            self.data.validate()?;
        }
        Ok(())
    }
}
