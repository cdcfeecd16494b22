use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::AdamConfig;

/// Composite training hyperparameters. Keys mirror the TOML config file;
/// every key is optional and falls back to the defaults below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    /// Learning-rate decay factor per `lr_decay_every` updates.
    pub lr_decay: f64,
    pub lr_decay_every: f64,
    /// Updates per epoch.
    pub epoch_updates: usize,
    pub chunk_size: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub main_epochs: usize,
    /// Teacher-mixing weight decay factor per `lambda_decay_every` updates.
    pub lambda_decay: f64,
    pub lambda_decay_every: f64,
    /// Once the teacher weight falls below this, it becomes exactly 0.
    pub lambda_floor: f64,
    /// Loss alternation runs are drawn uniformly from `min_run..=max_run` batches.
    pub min_run: usize,
    pub max_run: usize,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub seed: u64,
    /// Ablation: teacher weight 0 from the first update, pretraining included.
    pub no_teacher: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 0.001,
            lr_decay: 0.7,
            lr_decay_every: 1000.0,
            epoch_updates: 800,
            chunk_size: 16,
            batch_size: 160,
            pretrain_epochs: 5,
            main_epochs: 20,
            lambda_decay: 0.8,
            lambda_decay_every: 1000.0,
            lambda_floor: 0.05,
            min_run: 1,
            max_run: 3,
            clip: 5.0,
            seed: 1,
            no_teacher: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive =
            [self.lr, self.lr_decay, self.lr_decay_every, self.lambda_decay, self.lambda_decay_every, self.clip];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("rates, decays and clip must be positive"));
        }
        if self.epoch_updates == 0 || self.chunk_size == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epoch, chunk and batch sizes must be positive"));
        }
        if !(self.lambda_floor > 0.0 && self.lambda_floor < 1.0) {
            return Err(Error::invalid("lambda_floor must lie in (0, 1)"));
        }
        if self.min_run == 0 || self.min_run > self.max_run {
            return Err(Error::invalid("need 1 <= min_run <= max_run"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, decay: self.lr_decay, decay_every: self.lr_decay_every, ..AdamConfig::default() }
    }

    pub fn total_updates(&self) -> usize {
        (self.pretrain_epochs + self.main_epochs) * self.epoch_updates
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainingConfig = toml::from_str(text).map_err(|e| Error::format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain config serializes")
    }
}
