use crate::analysis::RunKey;
use crate::data::{AugmentSpec, TaskData};
use crate::error::{Error, Result};
use crate::nets::ArchDescriptor;
use crate::optim::TrainConfig;
use crate::parallel;
use crate::rng::RngStream;

use super::{run_bifurcation_experiment, BifurcationOutcome, BifurcationPlan, Experiment};
use rand::RngCore;

/// Hyperparameter axes of a sweep. Every combination is run once per replicate.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub etas: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub weight_decays: Vec<f64>,
    pub augment: Vec<bool>,
    pub replicates: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            etas: vec![0.003, 0.01, 0.03, 0.1, 0.3, 1.0],
            batch_sizes: vec![16, 64, 256],
            weight_decays: vec![5e-4],
            augment: vec![false],
            replicates: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub arch: ArchDescriptor,
    /// Momentum, warmup, precision and checked mode for every cell.
    pub base: TrainConfig,
    /// Transform used by cells with augmentation switched on.
    pub augment_spec: AugmentSpec,
    pub grid: GridSpec,
    pub bifurcation: BifurcationPlan,
    pub seed: u64,
}

/// One (configuration, replicate) job.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    /// Configuration index, shared by all replicates.
    pub index: usize,
    pub replicate: u64,
    pub config: TrainConfig,
    /// Seed of initialization and all training streams.
    pub seed: u64,
}

impl SweepCell {
    pub fn config_id(&self) -> String {
        format!("c{:03}-r{}", self.index, self.replicate)
    }

    pub fn key(&self) -> RunKey {
        RunKey::new(self.config_id(), &self.config)
    }
}

/// Seed of replicate `r` for the stream family `label`.
pub fn replicate_seed(seed: u64, label: &str, replicate: u64) -> u64 {
    RngStream::derive(seed, label, replicate).next_u64()
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.etas.is_empty() || g.batch_sizes.is_empty() || g.weight_decays.is_empty() || g.augment.is_empty() {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        if g.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        self.arch.validate()?;
        self.bifurcation.validate()?;
        for cell in self.cells() {
            cell.config.validate()?;
        }
        Ok(())
    }

    /// Cells in plan order: replicate, then η, B, λ and augmentation.
    pub fn cells(&self) -> Vec<SweepCell> {
        let g = &self.grid;
        let mut out = Vec::new();
        for replicate in 0..g.replicates {
            let seed = replicate_seed(self.seed, "run", replicate);
            let mut index = 0;
            for &lr in &g.etas {
                for &batch_size in &g.batch_sizes {
                    for &weight_decay in &g.weight_decays {
                        for &aug in &g.augment {
                            let augment = if aug { self.augment_spec.clone() } else { AugmentSpec::disabled() };
                            out.push(SweepCell {
                                index,
                                replicate,
                                config: TrainConfig {
                                    lr,
                                    batch_size,
                                    weight_decay,
                                    augment,
                                    ..self.base.clone()
                                },
                                seed,
                            });
                            index += 1;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn experiment<'a>(&self, cell: &SweepCell, task: &'a TaskData) -> Experiment<'a> {
        Experiment {
            key: cell.key(),
            arch: self.arch.clone(),
            config: cell.config.clone(),
            plan: self.bifurcation.clone(),
            task,
            seed: cell.seed,
        }
    }
}

/// Runs every cell, with `tasks[r]` as the data of replicate `r`, and hands
/// each outcome to `finish`. Results come back in plan order.
pub fn run_sweep<R, F>(plan: &SweepPlan, tasks: &[TaskData], finish: F) -> Result<Vec<(SweepCell, Result<R>)>>
where
    R: Send,
    F: Fn(&SweepCell, &TaskData, BifurcationOutcome) -> Result<R> + Sync + Send,
{
    plan.validate()?;
    if tasks.len() as u64 != plan.grid.replicates {
        return Err(Error::Config(format!(
            "{} replicates but {} task datasets",
            plan.grid.replicates,
            tasks.len()
        )));
    }
    let cells = plan.cells();
    let results = parallel::par_map(&cells, |cell| {
        let task = &tasks[cell.replicate as usize];
        run_bifurcation_experiment(&plan.experiment(cell, task)).and_then(|out| finish(cell, task, out))
    });
    Ok(cells.into_iter().zip(results).collect())
}
