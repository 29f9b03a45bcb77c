use crate::analysis::normalized_accuracy;
use crate::data::{steps_per_epoch, Dataset, TaskData};
use crate::error::{Error, Result};
use crate::merge::{task_arithmetic_merge, task_vector};
use crate::nets::{evaluate, ArchDescriptor, EvalMetrics, ParamVector, Precision};
use crate::optim::{ScheduleSpec, TrainConfig};
use crate::parallel;
use crate::tensor::Scalar;

use super::{run_fingerprint, BifurcationOutcome, RunStreams, Trainer};

/// Evaluation of `θ_base + α·Σ τᵢ` at one α.
#[derive(Clone, Debug, PartialEq)]
pub struct TaPoint {
    pub alpha: f64,
    /// One entry per evaluation dataset.
    pub per_task: Vec<EvalMetrics>,
    /// Against the single-model accuracies, when given.
    pub normalized_accuracy: Option<f64>,
}

impl TaPoint {
    pub fn mean_accuracy(&self) -> f64 {
        self.per_task.iter().map(|m| m.accuracy).sum::<f64>() / self.per_task.len() as f64
    }
}

/// Sweeps a common coefficient over all task vectors.
pub fn task_arithmetic_curve(
    base: &ParamVector,
    finetuned: &[&ParamVector],
    grid: &[f64],
    eval: &[&Dataset],
    singles: Option<&[f64]>,
    precision: Precision,
) -> Result<Vec<TaPoint>> {
    if eval.is_empty() {
        return Err(Error::Config("task arithmetic needs at least one evaluation set".into()));
    }
    let vectors = finetuned.iter().map(|m| task_vector(m, base)).collect::<Result<Vec<_>>>()?;
    parallel::par_map(grid, |&alpha| -> Result<TaPoint> {
        let merged = task_arithmetic_merge(base, &vectors, &vec![alpha; vectors.len()])?;
        let per_task = eval.iter().map(|d| evaluate(&merged, d, precision)).collect::<Result<Vec<_>>>()?;
        let normalized = match singles {
            Some(s) => Some(normalized_accuracy(&per_task.iter().map(|m| m.accuracy).collect::<Vec<_>>(), s)?),
            None => None,
        };
        Ok(TaPoint {
            alpha,
            per_task,
            normalized_accuracy: normalized,
        })
    })
    .into_iter()
    .collect()
}

/// Largest mean-accuracy decrease relative to `α = 1` over the grid.
pub fn extrapolation_drop(points: &[TaPoint]) -> Option<f64> {
    let at_one = points.iter().find(|p| p.alpha == 1.0)?.mean_accuracy();
    let worst = points.iter().map(TaPoint::mean_accuracy).fold(f64::INFINITY, f64::min);
    Some((at_one - worst).max(0.0))
}

/// Task-arithmetic curve of one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TaCurve {
    pub checkpoint_epoch: u64,
    pub points: Vec<TaPoint>,
}

/// Setting (b): every checkpoint is its own base and the two branch
/// endpoints provide the task vectors. Diverged pairs are skipped.
pub fn setting_b(outcome: &BifurcationOutcome, task: &TaskData, grid: &[f64], precision: Precision) -> Result<Vec<TaCurve>> {
    let mut curves = Vec::new();
    for (i, (ckpt, (a, b))) in outcome.trunk.checkpoints.iter().zip(&outcome.branches).enumerate() {
        let (Some(a), Some(b)) = (&a.params, &b.params) else {
            continue;
        };
        curves.push(TaCurve {
            checkpoint_epoch: outcome.checkpoint_epoch(i),
            points: task_arithmetic_curve(&ckpt.params, &[a, b], grid, &[&task.test], None, precision)?,
        });
    }
    Ok(curves)
}

/// Lengths of the multi-task pretraining and the per-task finetuning.
#[derive(Clone, Debug, PartialEq)]
pub struct SettingAPlan {
    pub pretrain_epochs: u64,
    pub finetune_epochs: u64,
}

impl Default for SettingAPlan {
    fn default() -> Self {
        Self {
            pretrain_epochs: 20,
            finetune_epochs: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SettingA {
    pub base: ParamVector,
    pub finetuned: Vec<ParamVector>,
    /// Test accuracy of each finetuned model on its own task.
    pub singles: Vec<f64>,
    pub curve: Vec<TaPoint>,
}

/// Setting (a): a base pretrained on the union of all tasks, one decayed
/// finetune per task, and the task-arithmetic curve evaluated per task.
pub fn run_setting_a(
    arch: &ArchDescriptor,
    config: &TrainConfig,
    tasks: &[TaskData],
    plan: &SettingAPlan,
    grid: &[f64],
    seed: u64,
) -> Result<SettingA> {
    if tasks.len() < 2 {
        return Err(Error::Config("setting (a) needs at least two tasks".into()));
    }
    if plan.pretrain_epochs == 0 || plan.finetune_epochs == 0 {
        return Err(Error::Config("pretraining and finetuning need at least one epoch".into()));
    }
    let union = Dataset::concat(&tasks.iter().map(|t| &t.train).collect::<Vec<_>>())?;
    let init = ParamVector::build(arch, seed)?;
    let base = match config.precision {
        Precision::F32 => pretrain_as::<f32>(&init, config, plan, &union, seed)?,
        Precision::F64 => pretrain_as::<f64>(&init, config, plan, &union, seed)?,
    };
    let mut finetuned = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        finetuned.push(match config.precision {
            Precision::F32 => finetune_as::<f32>(&base, config, plan, &task.train, seed, i as u64)?,
            Precision::F64 => finetune_as::<f64>(&base, config, plan, &task.train, seed, i as u64)?,
        });
    }
    let singles = finetuned
        .iter()
        .zip(tasks)
        .map(|(m, t)| Ok(evaluate(m, &t.test, config.precision)?.accuracy))
        .collect::<Result<Vec<f64>>>()?;
    let tests: Vec<&Dataset> = tasks.iter().map(|t| &t.test).collect();
    let refs: Vec<&ParamVector> = finetuned.iter().collect();
    let curve = task_arithmetic_curve(&base, &refs, grid, &tests, Some(&singles), config.precision)?;
    Ok(SettingA {
        base,
        finetuned,
        singles,
        curve,
    })
}

fn finish<T: Scalar>(t: &mut Trainer<T>, epochs: u64) -> Result<ParamVector> {
    let s = t.run_epochs(epochs)?;
    if let Some(step) = s.diverged_at {
        return Err(Error::NonFiniteGradient { step });
    }
    t.params()
}

fn pretrain_as<T: Scalar>(init: &ParamVector, config: &TrainConfig, plan: &SettingAPlan, data: &Dataset, seed: u64) -> Result<ParamVector> {
    let spe = steps_per_epoch(data.len(), config.batch_size) as u64;
    let warmup = (config.warmup_epochs * spe).min(plan.pretrain_epochs * spe);
    let schedule = ScheduleSpec {
        warmup_steps: warmup,
        stable_steps: plan.pretrain_epochs * spe - warmup,
        decay_steps: 0,
    };
    let hash = run_fingerprint(init.arch(), config, seed);
    let mut t = Trainer::<T>::new(init, config, schedule, data, RunStreams::derive(seed, "pretrain", 0), hash)?;
    finish(&mut t, plan.pretrain_epochs)
}

fn finetune_as<T: Scalar>(
    base: &ParamVector,
    config: &TrainConfig,
    plan: &SettingAPlan,
    data: &Dataset,
    seed: u64,
    task: u64,
) -> Result<ParamVector> {
    let spe = steps_per_epoch(data.len(), config.batch_size) as u64;
    let schedule = ScheduleSpec {
        warmup_steps: 0,
        stable_steps: 0,
        decay_steps: plan.finetune_epochs * spe,
    };
    let hash = run_fingerprint(base.arch(), config, seed);
    let mut t = Trainer::<T>::new(base, config, schedule, data, RunStreams::derive(seed, "finetune", task), hash)?;
    finish(&mut t, plan.finetune_epochs)
}
