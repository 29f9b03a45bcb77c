//! The bifurcation experiment: constant-rate trunk with periodic checkpoints,
//! two decayed branches per checkpoint, merge and evaluation; plus the two
//! task-arithmetic settings.

mod checkpoint;
mod sweep;
mod task_arithmetic;
mod trainer;

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use task_arithmetic::{
    extrapolation_drop, run_setting_a, setting_b, task_arithmetic_curve, SettingA, SettingAPlan, TaCurve, TaPoint,
};
pub use sweep::{replicate_seed, run_sweep, GridSpec, SweepCell, SweepPlan};
pub use trainer::{EpochSummary, RunStreams, Trainer};

use crate::analysis::{alpha_grid, alpha_sweep, classify_transition, EvalPair, MergeReport, RunKey, Transition, TransitionClass};
use crate::data::{steps_per_epoch, Dataset, TaskData};
use crate::error::{Error, Result};
use crate::merge::{MergeSpec, StatsPolicy};
use crate::nets::{evaluate, ArchDescriptor, EvalMetrics, ParamVector, Precision};
use crate::optim::{ScheduleSpec, TrainConfig};
use crate::parallel;
use crate::tensor::Scalar;

/// Trunk and branch lengths plus merge settings.
#[derive(Clone, Debug, PartialEq)]
pub struct BifurcationPlan {
    /// Constant-rate trunk length in epochs (warmup included).
    pub stable_epochs: u64,
    pub checkpoint_interval: u64,
    pub decay_epochs: u64,
    pub branch_seeds: (u64, u64),
    pub alpha: f64,
    /// Points of the endpoint interpolation curve.
    pub curve_points: usize,
    pub tau_rel: f64,
    pub stats: StatsPolicy,
    /// Also branch from the untrained initialization (epoch 0).
    pub include_init: bool,
    /// Branches first finish the trunk's constant-rate budget, so a branch
    /// taken at epoch `e` runs `stable_epochs - e` epochs before decaying.
    pub fixed_budget: bool,
}

impl Default for BifurcationPlan {
    fn default() -> Self {
        Self {
            stable_epochs: 60,
            checkpoint_interval: 5,
            decay_epochs: 10,
            branch_seeds: (1, 2),
            alpha: 0.5,
            curve_points: 21,
            tau_rel: crate::analysis::TAU_REL,
            stats: StatsPolicy::Interpolate,
            include_init: false,
            fixed_budget: false,
        }
    }
}

impl BifurcationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_interval == 0 || self.stable_epochs < self.checkpoint_interval {
            return Err(Error::Config(format!(
                "need 1 <= checkpoint interval <= stable epochs, got {} and {}",
                self.checkpoint_interval, self.stable_epochs
            )));
        }
        if self.decay_epochs == 0 {
            return Err(Error::Config("decay epochs must be at least 1".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config(format!("merge α must be finite, got {}", self.alpha)));
        }
        if self.curve_points < 3 {
            return Err(Error::Config("interpolation curve needs at least 3 points".into()));
        }
        if !(self.tau_rel >= 0.0) {
            return Err(Error::Config("τ_rel must be non-negative".into()));
        }
        Ok(())
    }

    pub fn checkpoint_count(&self) -> u64 {
        self.stable_epochs / self.checkpoint_interval + u64::from(self.include_init)
    }

    /// Trunk epoch of every planned checkpoint, in order.
    pub fn checkpoint_epochs(&self) -> Vec<u64> {
        let first = if self.include_init { 0 } else { 1 };
        (first..=self.stable_epochs / self.checkpoint_interval).map(|i| i * self.checkpoint_interval).collect()
    }
}

/// Canonical description of a run, hashed into every checkpoint.
pub fn run_fingerprint(arch: &ArchDescriptor, config: &TrainConfig, seed: u64) -> u64 {
    config_hash(&format!(
        "{arch}|lr={:e}|b={}|mu={:e}|wd={:e}|aug={:?}|warmup={}|precision={:?}|seed={seed}",
        config.lr, config.batch_size, config.momentum, config.weight_decay, config.augment, config.warmup_epochs, config.precision
    ))
}

pub fn trunk_schedule(config: &TrainConfig, steps_per_epoch: u64) -> ScheduleSpec {
    ScheduleSpec::constant(config.warmup_epochs * steps_per_epoch)
}

/// Branch schedule continuing the trunk's step count: the decay starts at
/// step `decay_from` and lasts `decay_epochs`.
pub fn branch_schedule(config: &TrainConfig, decay_from: u64, decay_epochs: u64, steps_per_epoch: u64) -> ScheduleSpec {
    let warmup = config.warmup_epochs * steps_per_epoch;
    ScheduleSpec {
        warmup_steps: warmup,
        stable_steps: decay_from.saturating_sub(warmup),
        decay_steps: decay_epochs * steps_per_epoch,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrunkRun {
    pub checkpoints: Vec<Checkpoint>,
    pub epoch_losses: Vec<f64>,
    pub diverged_at: Option<u64>,
    pub steps_per_epoch: u64,
}

/// Warmup then constant-rate training with a checkpoint every
/// `checkpoint_interval` epochs. Divergence stops the trunk and keeps the
/// checkpoints taken so far.
pub fn train_trunk(arch: &ArchDescriptor, config: &TrainConfig, plan: &BifurcationPlan, data: &Dataset, seed: u64) -> Result<TrunkRun> {
    plan.validate()?;
    match config.precision {
        Precision::F32 => trunk_as::<f32>(arch, config, plan, data, seed),
        Precision::F64 => trunk_as::<f64>(arch, config, plan, data, seed),
    }
}

fn trunk_as<T: Scalar>(arch: &ArchDescriptor, config: &TrainConfig, plan: &BifurcationPlan, data: &Dataset, seed: u64) -> Result<TrunkRun> {
    let init = ParamVector::build(arch, seed)?;
    let spe = steps_per_epoch(data.len(), config.batch_size) as u64;
    let mut t = Trainer::<T>::new(
        &init,
        config,
        trunk_schedule(config, spe),
        data,
        RunStreams::derive(seed, "trunk", 0),
        run_fingerprint(arch, config, seed),
    )?;
    let mut run = TrunkRun {
        checkpoints: Vec::new(),
        epoch_losses: Vec::new(),
        diverged_at: None,
        steps_per_epoch: spe,
    };
    if plan.include_init {
        run.checkpoints.push(t.checkpoint()?);
    }
    for epoch in 1..=plan.stable_epochs {
        let s = t.run_epochs(1)?;
        run.epoch_losses.push(s.mean_loss);
        if s.diverged_at.is_some() {
            run.diverged_at = s.diverged_at;
            break;
        }
        if epoch % plan.checkpoint_interval == 0 {
            run.checkpoints.push(t.checkpoint()?);
        }
    }
    Ok(run)
}

/// Endpoint of one decayed branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchRun {
    /// `None` when the branch diverged.
    pub params: Option<ParamVector>,
    /// Mean training loss over the last branch epoch.
    pub final_loss: f64,
    pub diverged_at: Option<u64>,
}

/// Streams of a branch: derived from the run seed, the branch seed and the
/// checkpoint step, so equal branch seeds give identical branches.
pub fn branch_streams(seed: u64, branch_seed: u64, ckpt_step: u64) -> RunStreams {
    RunStreams::derive(seed, &format!("branch-{branch_seed}"), ckpt_step)
}

/// Trains both branches of a checkpoint through the decay phase.
pub fn bifurcate(ckpt: &Checkpoint, config: &TrainConfig, plan: &BifurcationPlan, data: &Dataset, seed: u64) -> Result<(BranchRun, BranchRun)> {
    let run = |branch_seed| match config.precision {
        Precision::F32 => branch_as::<f32>(ckpt, config, plan, data, seed, branch_seed),
        Precision::F64 => branch_as::<f64>(ckpt, config, plan, data, seed, branch_seed),
    };
    Ok((run(plan.branch_seeds.0)?, run(plan.branch_seeds.1)?))
}

fn branch_as<T: Scalar>(
    ckpt: &Checkpoint,
    config: &TrainConfig,
    plan: &BifurcationPlan,
    data: &Dataset,
    seed: u64,
    branch_seed: u64,
) -> Result<BranchRun> {
    let spe = steps_per_epoch(data.len(), config.batch_size) as u64;
    let decay_from = if plan.fixed_budget { ckpt.step.max(plan.stable_epochs * spe) } else { ckpt.step };
    let schedule = branch_schedule(config, decay_from, plan.decay_epochs, spe);
    let epochs = (decay_from - ckpt.step) / spe + plan.decay_epochs;
    let mut t = Trainer::<T>::branch(ckpt, config, schedule, data, branch_streams(seed, branch_seed, ckpt.step))?;
    let mut last = EpochSummary {
        mean_loss: f64::NAN,
        diverged_at: None,
    };
    for _ in 0..epochs {
        last = t.run_epochs(1)?;
        if last.diverged_at.is_some() {
            break;
        }
    }
    Ok(BranchRun {
        params: if last.diverged_at.is_none() { Some(t.params()?) } else { None },
        final_loss: last.mean_loss,
        diverged_at: last.diverged_at,
    })
}

fn eval_pair(p: &ParamVector, task: &TaskData, precision: Precision) -> Result<EvalPair> {
    Ok(EvalPair {
        train: evaluate(p, &task.train, precision)?,
        test: evaluate(p, &task.test, precision)?,
    })
}

fn nan_pair() -> EvalPair {
    let m = EvalMetrics {
        loss: f64::NAN,
        accuracy: f64::NAN,
        count: 0,
    };
    EvalPair { train: m, test: m }
}

/// Merges the two endpoints of one checkpoint and evaluates everything.
///
/// The interpolation curve is measured on the test split with interpolated
/// statistics; the merged model itself follows the plan's statistics policy.
pub fn merge_event(
    key: &RunKey,
    checkpoint_epoch: u64,
    branches: &(BranchRun, BranchRun),
    plan: &BifurcationPlan,
    task: &TaskData,
    precision: Precision,
) -> Result<MergeReport> {
    let (Some(a), Some(b)) = (&branches.0.params, &branches.1.params) else {
        return Ok(MergeReport {
            key: key.clone(),
            checkpoint_epoch,
            alpha: plan.alpha,
            merged: nan_pair(),
            a: nan_pair(),
            b: nan_pair(),
            gain_mean: f64::NAN,
            gain_a: f64::NAN,
            gain_b: f64::NAN,
            curve: Vec::new(),
            transition: Transition {
                class: TransitionClass::Flat,
                barrier: f64::NAN,
                dip: f64::NAN,
                threshold: f64::NAN,
            },
            diverged: true,
        });
    };
    let spec = MergeSpec::linear(plan.alpha).with_stats(plan.stats);
    let merged = spec.apply(None, &[a, b], Some(&task.train))?;
    let curve = alpha_sweep(a, b, &alpha_grid(0.0, 1.0, plan.curve_points), &task.test, precision)?;
    let pairs: Vec<(f64, f64)> = curve.iter().map(|p| (p.alpha, p.loss)).collect();
    Ok(MergeReport {
        key: key.clone(),
        checkpoint_epoch,
        alpha: plan.alpha,
        merged: eval_pair(&merged, task, precision)?,
        a: eval_pair(a, task, precision)?,
        b: eval_pair(b, task, precision)?,
        gain_mean: 0.0,
        gain_a: 0.0,
        gain_b: 0.0,
        transition: classify_transition(&pairs, plan.tau_rel)?,
        curve,
        diverged: false,
    }
    .with_gains())
}

/// One grid cell of a sweep.
#[derive(Clone, Debug)]
pub struct Experiment<'a> {
    pub key: RunKey,
    pub arch: ArchDescriptor,
    pub config: TrainConfig,
    pub plan: BifurcationPlan,
    pub task: &'a TaskData,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BifurcationOutcome {
    pub trunk: TrunkRun,
    pub branches: Vec<(BranchRun, BranchRun)>,
    pub reports: Vec<MergeReport>,
}

impl BifurcationOutcome {
    pub fn diverged(&self) -> bool {
        self.trunk.diverged_at.is_some() || self.reports.iter().any(|r| r.diverged)
    }

    pub fn checkpoint_epoch(&self, i: usize) -> u64 {
        self.trunk.checkpoints[i].step / self.trunk.steps_per_epoch
    }
}

/// Trunk, branches and one merge report per checkpoint.
pub fn run_bifurcation_experiment(exp: &Experiment) -> Result<BifurcationOutcome> {
    exp.config.validate()?;
    if exp.key.s_tilde().to_bits() != crate::optim::effective_noise(exp.config.lr, exp.config.batch_size, exp.config.momentum)?.to_bits() {
        return Err(Error::Config(format!("run key `{}` does not describe its config", exp.key.config_id)));
    }
    let trunk = train_trunk(&exp.arch, &exp.config, &exp.plan, &exp.task.train, exp.seed)?;
    let jobs: Vec<&Checkpoint> = trunk.checkpoints.iter().collect();
    let results = parallel::par_map(&jobs, |ckpt| -> Result<((BranchRun, BranchRun), MergeReport)> {
        let branches = bifurcate(ckpt, &exp.config, &exp.plan, &exp.task.train, exp.seed)?;
        let epoch = ckpt.step / trunk.steps_per_epoch;
        let report = merge_event(&exp.key, epoch, &branches, &exp.plan, exp.task, exp.config.precision)?;
        Ok((branches, report))
    });
    let mut branches = Vec::with_capacity(results.len());
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        let (b, rep) = r?;
        branches.push(b);
        reports.push(rep);
    }
    Ok(BifurcationOutcome { trunk, branches, reports })
}
