//! Training configuration, learning-rate decay and checkpoint epochs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleMode;
use crate::Error;

/// How evaluation checkpoints are spaced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointMode {
    /// 1, 2, 4, 8, ... capped at the final epoch, which is always included.
    #[default]
    PowersOfTwo,
    /// 1, 2, 4, 6, 8, ... and the final epoch.
    EveryTwo,
}

/// Checkpoint epochs (1-based) for a run of `epochs` epochs.
pub fn checkpoint_epochs(epochs: u32, mode: CheckpointMode) -> Vec<u32> {
    if epochs == 0 {
        return Vec::new();
    }
    let mut out = vec![1];
    match mode {
        CheckpointMode::PowersOfTwo => {
            let mut e = 2u32;
            while e <= epochs {
                out.push(e);
                e = match e.checked_mul(2) {
                    Some(v) => v,
                    None => break,
                };
            }
        }
        CheckpointMode::EveryTwo => out.extend((2..=epochs).step_by(2)),
    }
    if *out.last().unwrap() != epochs {
        out.push(epochs);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// Fractions of `epochs` after which the learning rate decays.
    pub lr_decay_milestones: Vec<f64>,
    pub checkpoint_mode: CheckpointMode,
    pub ensemble_mode: EnsembleMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// SGD with momentum 0.9, weight decay 1e-4, batch 16 and x0.1 decay
    /// at half and three quarters of a 300-epoch run.
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            lr_initial: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_milestones: vec![0.5, 0.75],
            checkpoint_mode: CheckpointMode::PowersOfTwo,
            ensemble_mode: EnsembleMode::Logits,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_initial.is_finite() && self.lr_initial > 0.0) {
            return bad(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor));
        }
        let mut prev = 0.0;
        for &m in &self.lr_decay_milestones {
            if !(m > prev && m < 1.0) {
                return bad(format!(
                    "lr_decay_milestones must be strictly increasing in (0, 1), got {:?}",
                    self.lr_decay_milestones
                ));
            }
            prev = m;
        }
        Ok(())
    }

    /// Epoch index (0-based) at which each milestone takes effect.
    pub fn milestone_epochs(&self) -> Vec<u32> {
        self.lr_decay_milestones
            .iter()
            .map(|m| libm::round(m * self.epochs as f64) as u32)
            .collect()
    }

    /// Learning rate during 0-based `epoch`.
    pub fn lr_at(&self, epoch: u32) -> f64 {
        let passed = self.milestone_epochs().iter().filter(|&&m| epoch >= m).count();
        self.lr_initial * libm::pow(self.lr_decay_factor, passed as f64)
    }

    pub fn checkpoints(&self) -> Vec<u32> {
        checkpoint_epochs(self.epochs, self.checkpoint_mode)
    }
}
