use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    /// Non-improving validation epochs before the rate is halved.
    pub halving_patience: usize,
    /// Non-improving validation epochs before training stops.
    pub early_stop_patience: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: 5,
            peak_lr: 2e-4,
            floor_lr: 1e-6,
            halving_patience: 2,
            early_stop_patience: 10,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.floor_lr > 0.0 && self.floor_lr <= self.peak_lr) {
            return Err(Error::Config("need 0 < floor_lr <= peak_lr".into()));
        }
        if self.halving_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear warm-up, then halving on validation plateaus, with early stopping.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    cfg: ScheduleConfig,
    lr: f64,
    best: f64,
    since_best: usize,
    since_change: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochOutcome {
    Improved,
    NoImprovement,
    Stop,
}

impl LrSchedule {
    pub fn new(cfg: ScheduleConfig) -> Self {
        Self {
            lr: cfg.peak_lr,
            cfg,
            best: f64::INFINITY,
            since_best: 0,
            since_change: 0,
        }
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.cfg.warmup_epochs {
            self.cfg.peak_lr * (epoch + 1) as f64 / self.cfg.warmup_epochs as f64
        } else {
            self.lr
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records the validation loss of `epoch`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> EpochOutcome {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_best = 0;
            self.since_change = 0;
            return EpochOutcome::Improved;
        }
        self.since_best += 1;
        if epoch >= self.cfg.warmup_epochs {
            self.since_change += 1;
            if self.since_change >= self.cfg.halving_patience {
                self.lr = (self.lr * 0.5).max(self.cfg.floor_lr);
                self.since_change = 0;
            }
        }
        if self.since_best >= self.cfg.early_stop_patience {
            EpochOutcome::Stop
        } else {
            EpochOutcome::NoImprovement
        }
    }
}
