//! Bookkeeping shared by the training loops: options, per-epoch logs and early stopping.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without improvement of the monitored loss before stopping.
    pub patience: usize,
    /// Smallest decrease that counts as an improvement.
    pub min_delta: f64,
    /// Stop as soon as the training loss falls below this value.
    pub target_loss: Option<f64>,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Learning-rate factor applied once per epoch; 1 keeps it constant.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { max_epochs: 300, batch_size: 32, patience: 10, min_delta: 0.0, target_loss: None, clip_norm: None, lr_decay: 1.0, seed: 0 }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        Ok(())
    }

    /// Learning-rate multiplier for 1-based `epoch`.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        self.lr_decay.powi(epoch.saturating_sub(1) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss name used in CSV headers, e.g. `bce`.
    pub loss: String,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn new(loss: &str) -> Self {
        Self { loss: loss.into(), epochs: Vec::new(), best_epoch: 0, stopped_early: false }
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("epoch,train_{0},val_{0}\n", self.loss);
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, val);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Tracks the best monitored loss and says when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    best_epoch: usize,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: f64::INFINITY, best_epoch: 0, waited: 0 }
    }

    /// Returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.best_epoch = epoch;
            self.waited = 0;
            (true, false)
        } else {
            self.waited += 1;
            (false, self.waited >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}
