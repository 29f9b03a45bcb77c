use crate::data::{augment, steps_per_epoch, Dataset, EpochSampler};
use crate::error::{Error, Result};
use crate::nets::{loss_and_grad, ArchDescriptor, ForwardOptions, ParamVector};
use crate::optim::{lr_at, sgd_step, DecayMask, OptimizerState, ScheduleSpec, TrainConfig};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

use super::checkpoint::Checkpoint;

/// Data-order and augmentation streams of one run.
#[derive(Clone, Debug)]
pub struct RunStreams {
    pub data: RngStream,
    pub augment: RngStream,
}

impl RunStreams {
    pub fn derive(seed: u64, label: &str, index: u64) -> Self {
        Self {
            data: RngStream::derive(seed, &format!("{label}-data"), index),
            augment: RngStream::derive(seed, &format!("{label}-augment"), index),
        }
    }
}

/// Mean training loss of an epoch, or the step at which the run diverged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub mean_loss: f64,
    pub diverged_at: Option<u64>,
}

/// One SGD run in precision `T`.
pub struct Trainer<'d, T: Scalar> {
    arch: ArchDescriptor,
    values: Vec<T>,
    aux: Vec<T>,
    opt: OptimizerState<T>,
    decay: DecayMask,
    sampler: EpochSampler,
    streams: RunStreams,
    config: TrainConfig,
    schedule: ScheduleSpec,
    data: &'d Dataset,
    config_hash: u64,
    diverged_at: Option<u64>,
}

impl<'d, T: Scalar> Trainer<'d, T> {
    pub fn new(
        params: &ParamVector,
        config: &TrainConfig,
        schedule: ScheduleSpec,
        data: &'d Dataset,
        streams: RunStreams,
        config_hash: u64,
    ) -> Result<Self> {
        config.validate()?;
        if data.sample_shape() != params.arch().input_shape.as_slice() {
            return Err(Error::Data(format!(
                "data samples {:?} do not fit `{}`",
                data.sample_shape(),
                params.arch()
            )));
        }
        if config.batch_size > data.len() {
            return Err(Error::Config(format!(
                "batch size {} exceeds the {} training samples",
                config.batch_size,
                data.len()
            )));
        }
        config.augment.validate(data.sample_shape())?;
        Ok(Self {
            arch: params.arch().clone(),
            values: params.values_as(),
            aux: params.aux_as(),
            opt: OptimizerState::new(params.len()),
            decay: DecayMask::from_layout(&params.arch().layout()),
            sampler: EpochSampler::new(),
            streams,
            config: config.clone(),
            schedule,
            data,
            config_hash,
            diverged_at: None,
        })
    }

    /// Resumes from a checkpoint with its own streams, momentum and step.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &TrainConfig, schedule: ScheduleSpec, data: &'d Dataset) -> Result<Self> {
        let streams = RunStreams {
            data: RngStream::from_state(ckpt.data_rng),
            augment: RngStream::from_state(ckpt.augment_rng),
        };
        Self::branch(ckpt, config, schedule, data, streams)
    }

    /// Continues a checkpoint's parameters and momentum under new streams.
    pub fn branch(ckpt: &Checkpoint, config: &TrainConfig, schedule: ScheduleSpec, data: &'d Dataset, streams: RunStreams) -> Result<Self> {
        let mut t = Self::new(&ckpt.params, config, schedule, data, streams, ckpt.config_hash)?;
        if ckpt.momentum.len() != t.values.len() {
            return Err(Error::Arch("checkpoint momentum length does not match its parameters".into()));
        }
        t.opt.momentum = ckpt.momentum.iter().map(|&m| T::from_f32(m)).collect();
        t.opt.step = ckpt.step;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        steps_per_epoch(self.data.len(), self.config.batch_size) as u64
    }

    pub fn diverged_at(&self) -> Option<u64> {
        self.diverged_at
    }

    /// One optimizer step; returns the batch loss. A non-finite loss or
    /// gradient marks the run as diverged (or aborts in checked mode).
    pub fn step(&mut self) -> Result<f64> {
        if let Some(step) = self.diverged_at {
            return Err(Error::NonFiniteGradient { step });
        }
        let lr = lr_at(&self.schedule, self.config.lr, self.opt.step);
        let batch = self.sampler.next_batch(self.data, self.config.batch_size, &mut self.streams.data)?;
        let x = augment(&batch.inputs, &self.config.augment, &mut self.streams.augment)?;
        let out = loss_and_grad(
            &self.arch,
            &self.values,
            &self.aux,
            &cast(&x),
            &batch.labels,
            ForwardOptions::train(),
        )?;
        let loss = out.loss.primal();
        if !loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            if self.config.checked {
                return Err(Error::NonFiniteGradient { step: self.opt.step });
            }
            self.diverged_at = Some(self.opt.step);
            return Ok(loss);
        }
        self.aux = out.aux;
        sgd_step(&mut self.values, &out.grad, &mut self.opt, &self.config.hyper(lr), &self.decay, self.config.checked)?;
        Ok(loss)
    }

    /// Runs whole epochs, stopping early on divergence.
    pub fn run_epochs(&mut self, epochs: u64) -> Result<EpochSummary> {
        let steps = epochs * self.steps_per_epoch();
        let mut total = 0.0;
        let mut taken = 0u64;
        for _ in 0..steps {
            let loss = self.step()?;
            if self.diverged_at.is_some() {
                break;
            }
            total += loss;
            taken += 1;
        }
        Ok(EpochSummary {
            mean_loss: if taken > 0 { total / taken as f64 } else { f64::NAN },
            diverged_at: self.diverged_at,
        })
    }

    /// Current parameters rounded to f32; fails once the run has produced
    /// non-finite statistics.
    pub fn params(&self) -> Result<ParamVector> {
        ParamVector::new(
            self.arch.clone(),
            self.values.iter().map(|v| v.primal() as f32).collect(),
            self.aux.iter().map(|v| v.primal() as f32).collect(),
        )
    }

    /// Snapshot at an epoch boundary.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        if !self.sampler.at_epoch_boundary() {
            return Err(Error::Config("checkpoints are only taken at epoch boundaries".into()));
        }
        Ok(Checkpoint {
            params: self.params()?,
            momentum: self.opt.momentum.iter().map(|m| m.primal() as f32).collect(),
            step: self.opt.step,
            data_rng: self.streams.data.state(),
            augment_rng: self.streams.augment.state(),
            config_hash: self.config_hash,
        })
    }
}

fn cast<T: Scalar>(x: &Tensor<f32>) -> Tensor<T> {
    x.cast::<T>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::nets::{evaluate, Precision};

    fn setup() -> (ParamVector, Dataset, TrainConfig) {
        let arch = ArchDescriptor::mlp_norm(&[4, 16, 3]).unwrap();
        let p = ParamVector::build(&arch, 3).unwrap();
        let d = make_synthetic(0, 96, 0, 3, 4, 1).unwrap().train;
        let cfg = TrainConfig {
            lr: 0.05,
            batch_size: 16,
            ..TrainConfig::default()
        };
        (p, d, cfg)
    }

    #[test]
    fn training_reduces_loss() {
        let (p, d, cfg) = setup();
        let before = evaluate(&p, &d, Precision::F32).unwrap().loss;
        let mut t = Trainer::<f32>::new(&p, &cfg, ScheduleSpec::constant(6), &d, RunStreams::derive(0, "t", 0), 0).unwrap();
        t.run_epochs(10).unwrap();
        let after = evaluate(&t.params().unwrap(), &d, Precision::F32).unwrap().loss;
        assert!(after < 0.5 * before, "{before} -> {after}");
        assert_eq!(t.step_count(), 60);
    }

    #[test]
    fn restore_continues_bitwise() {
        let (p, d, cfg) = setup();
        let s = ScheduleSpec::constant(6);
        let mut t = Trainer::<f32>::new(&p, &cfg, s, &d, RunStreams::derive(0, "t", 0), 9).unwrap();
        t.run_epochs(2).unwrap();
        let ck = t.checkpoint().unwrap();
        t.run_epochs(1).unwrap();
        let mut r = Trainer::<f32>::from_checkpoint(&Checkpoint::decode(&ck.encode()).unwrap(), &cfg, s, &d).unwrap();
        r.run_epochs(1).unwrap();
        assert_eq!(r.checkpoint().unwrap(), t.checkpoint().unwrap());
    }

    #[test]
    fn divergence_is_flagged() {
        let (_, d, mut cfg) = setup();
        let p = ParamVector::build(&ArchDescriptor::mlp(&[4, 16, 3]).unwrap(), 3).unwrap();
        cfg.lr = 1e6;
        cfg.weight_decay = 0.0;
        let mut t = Trainer::<f32>::new(&p, &cfg, ScheduleSpec::constant(0), &d, RunStreams::derive(0, "t", 0), 0).unwrap();
        let s = t.run_epochs(20).unwrap();
        assert!(s.diverged_at.is_some());
        cfg.checked = true;
        let mut t = Trainer::<f32>::new(&p, &cfg, ScheduleSpec::constant(0), &d, RunStreams::derive(0, "t", 0), 0).unwrap();
        assert!(matches!(t.run_epochs(20), Err(Error::NonFiniteGradient { .. })));
    }

    #[test]
    fn mid_epoch_checkpoint_rejected() {
        let (p, d, cfg) = setup();
        let mut t = Trainer::<f64>::new(&p, &cfg, ScheduleSpec::constant(6), &d, RunStreams::derive(0, "t", 0), 0).unwrap();
        t.step().unwrap();
        assert!(t.checkpoint().is_err());
    }
}
