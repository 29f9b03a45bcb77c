//! SGD with momentum and decoupled weight decay, the WSD schedule, and the
//! noise-scale quantities.

mod noise;
mod schedule;
mod sgd;

pub use noise::{effective_lr, effective_noise, gradient_noise_trace, GroupLr};
pub use schedule::{lr_at, ScheduleSpec};
pub use sgd::{sgd_step, DecayMask, OptimizerState, SgdHyper};

use crate::data::AugmentSpec;
use crate::error::{Error, Result};
use crate::nets::Precision;

/// Optimizer hyperparameters of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: AugmentSpec,
    pub warmup_epochs: u64,
    pub precision: Precision,
    /// Abort on non-finite values instead of flagging divergence at the end of a step.
    pub checked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: AugmentSpec::disabled(),
            warmup_epochs: 1,
            precision: Precision::F32,
            checked: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }

    /// Normalized effective noise `η / (B (1 − μ)²)`.
    pub fn s_tilde(&self) -> Result<f64> {
        effective_noise(self.lr, self.batch_size, self.momentum)
    }

    pub fn hyper(&self, lr: f64) -> SgdHyper {
        SgdHyper {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}
