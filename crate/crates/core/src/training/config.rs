use serde::{Deserialize, Serialize};

use super::optim::{AdamHyper, Optimizer};
use crate::error::{NddeError, Result};

/// Which quantities the optimizer may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub weights: bool,
    pub tau: bool,
    pub t: bool,
    pub h0: bool,
    pub readout: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            weights: true,
            tau: false,
            t: false,
            h0: false,
            readout: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    /// Items per optimizer step; `0` means the full dataset.
    pub batch_size: usize,
    pub seed: u64,
    pub trainable: Trainable,
    /// Learning-rate multiplier for the delay coordinate.
    pub tau_lr_scale: f64,
    /// Learning-rate multiplier for the terminal-time coordinate.
    pub t_lr_scale: f64,
    /// Consecutive divergent steps tolerated before the run is abandoned.
    pub max_retries: usize,
    /// Worker threads for the batch; `Some(1)` runs single-threaded.
    pub threads: Option<usize>,
}

impl TrainConfig {
    pub fn adam(lr: f64, epochs: usize) -> Self {
        Self {
            optimizer: Optimizer::Adam(AdamHyper::with_lr(lr)),
            epochs,
            batch_size: 0,
            seed: 0,
            trainable: Trainable::default(),
            tau_lr_scale: 1.0,
            t_lr_scale: 1.0,
            max_retries: 5,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr() > 0.0 && self.optimizer.lr().is_finite()) {
            return Err(NddeError::Config(format!(
                "learning rate must be positive, got {}",
                self.optimizer.lr()
            )));
        }
        if self.epochs == 0 {
            return Err(NddeError::Config("epochs must be at least 1".into()));
        }
        if !(self.tau_lr_scale >= 0.0 && self.t_lr_scale >= 0.0) {
            return Err(NddeError::Config("learning-rate scales must be nonnegative".into()));
        }
        if self.threads == Some(0) {
            return Err(NddeError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}
