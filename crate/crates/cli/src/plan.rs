//! Experiment plans: TOML files with a fixed set of sections and keys.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Deserialize;

use mergelab::analysis::EigOptions;
use mergelab::data::{read_image_binary, AugmentSpec, Split, SyntheticSpec, TaskData};
use mergelab::merge::StatsPolicy;
use mergelab::nets::{ArchDescriptor, ArchKind, Precision};
use mergelab::optim::TrainConfig;
use mergelab::protocol::{replicate_seed, BifurcationPlan, GridSpec, SettingAPlan, SweepPlan};
use mergelab::tensor::HvpMode;

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    /// Subcommand this plan is meant for; checked when present.
    pub command: Option<String>,
    pub seed: u64,
    pub workers: usize,
    pub precision: u32,
    pub charts: bool,
    pub out: Option<PathBuf>,
    pub data: DataPlan,
    pub arch: ArchPlan,
    pub train: TrainPlan,
    pub bifurcation: BifurcationSection,
    pub analysis: AnalysisPlan,
    pub probe: ProbePlan,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            command: None,
            seed: 0,
            workers: 0,
            precision: 32,
            charts: true,
            out: None,
            data: DataPlan::default(),
            arch: ArchPlan::default(),
            train: TrainPlan::default(),
            bifurcation: BifurcationSection::default(),
            analysis: AnalysisPlan::default(),
            probe: ProbePlan::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Image,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataPlan {
    pub source: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    pub class_count: usize,
    pub input_dim: usize,
    pub cluster_std: f64,
    pub center_radius: f64,
    /// Number of synthetic tasks for task-arithmetic setting (a).
    pub tasks: usize,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DataPlan {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            n_train: 1024,
            n_test: 4000,
            class_count: 8,
            input_dim: 32,
            cluster_std: 1.0,
            center_radius: 3.0,
            tasks: 2,
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ArchPlan {
    pub kind: String,
    /// Hidden widths, or the two channel counts of `tiny_cnn`.
    pub hidden: Vec<usize>,
}

impl Default for ArchPlan {
    fn default() -> Self {
        Self {
            kind: "mlp_norm".into(),
            hidden: vec![256, 256],
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub eta: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub weight_decay: Vec<f64>,
    pub augment: Vec<bool>,
    pub momentum: f64,
    pub warmup_epochs: u64,
    pub replicates: u64,
    pub checked: bool,
    /// Length of `train` runs: constant phase, then decay.
    pub epochs: u64,
    pub decay_epochs: u64,
    pub jitter_std: f64,
    pub flip_prob: f64,
    pub crop_pad: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        let grid = GridSpec::default();
        Self {
            eta: grid.etas,
            batch_size: grid.batch_sizes,
            weight_decay: vec![1e-3],
            augment: grid.augment,
            momentum: 0.9,
            warmup_epochs: 1,
            replicates: grid.replicates,
            checked: false,
            epochs: 60,
            decay_epochs: 10,
            jitter_std: AugmentSpec::vectors().jitter_std,
            flip_prob: AugmentSpec::images().flip_prob,
            crop_pad: AugmentSpec::images().crop_pad,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum StatsChoice {
    Interpolate,
    Recompute,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BifurcationSection {
    pub stable_epochs: u64,
    pub checkpoint_interval: u64,
    pub decay_epochs: u64,
    pub branch_seeds: [u64; 2],
    pub alpha: f64,
    pub curve_points: usize,
    pub tau_rel: f64,
    pub stats: StatsChoice,
    pub stats_batches: usize,
    pub stats_batch_size: usize,
    /// Also branch from the initialization.
    pub include_init: bool,
    /// Branches finish the constant-rate budget before decaying.
    pub fixed_budget: bool,
    /// Also write trunk checkpoints and branch endpoints.
    pub save_checkpoints: bool,
}

impl Default for BifurcationSection {
    fn default() -> Self {
        let p = BifurcationPlan::default();
        Self {
            stable_epochs: p.stable_epochs,
            checkpoint_interval: p.checkpoint_interval,
            decay_epochs: p.decay_epochs,
            branch_seeds: [p.branch_seeds.0, p.branch_seeds.1],
            alpha: p.alpha,
            curve_points: p.curve_points,
            tau_rel: p.tau_rel,
            stats: StatsChoice::Interpolate,
            stats_batches: 8,
            stats_batch_size: 128,
            include_init: p.include_init,
            fixed_budget: p.fixed_budget,
            save_checkpoints: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisPlan {
    /// Task-arithmetic probe on every checkpoint of a sweep.
    pub task_arithmetic: bool,
    pub ta_alpha_max: f64,
    pub ta_points: usize,
    pub pretrain_epochs: u64,
    pub finetune_epochs: u64,
}

impl Default for AnalysisPlan {
    fn default() -> Self {
        let a = SettingAPlan::default();
        Self {
            task_arithmetic: true,
            ta_alpha_max: 1.5,
            ta_points: 16,
            pretrain_epochs: a.pretrain_epochs,
            finetune_epochs: a.finetune_epochs,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MergeChoice {
    Linear,
    TaskArithmetic,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum HvpChoice {
    Central,
    ForwardOverReverse,
}

/// Inputs of `merge`, `hessian` and `slice`. Paths are relative to the plan file.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbePlan {
    pub model: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub models: Vec<PathBuf>,
    pub method: MergeChoice,
    pub alpha: f64,
    pub coeffs: Vec<f64>,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub points: usize,
    pub hessian_k: usize,
    pub hessian_samples: usize,
    pub hessian_tol: f64,
    pub hessian_max_iters: usize,
    pub hvp: HvpChoice,
    pub resolution: usize,
}

impl Default for ProbePlan {
    fn default() -> Self {
        let e = EigOptions::default();
        Self {
            model: None,
            base: None,
            models: Vec::new(),
            method: MergeChoice::Linear,
            alpha: 0.5,
            coeffs: Vec::new(),
            alpha_min: 0.0,
            alpha_max: 1.0,
            points: 21,
            hessian_k: 4,
            hessian_samples: 256,
            hessian_tol: e.tol,
            hessian_max_iters: e.max_iters,
            hvp: HvpChoice::Central,
            resolution: 21,
        }
    }
}

/// Overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub precision: Option<u32>,
    pub charts: Option<bool>,
}

/// A parsed plan plus the directory its relative paths resolve against.
#[derive(Clone, Debug)]
pub struct LoadedPlan {
    pub plan: ExperimentPlan,
    pub root: PathBuf,
    /// Plan file bytes, hashed into the manifest.
    pub source: String,
}

impl ExperimentPlan {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).context("invalid plan")
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<LoadedPlan> {
        let source = std::fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
        let mut plan = Self::parse(&source).with_context(|| format!("in {}", path.display()))?;
        plan.apply(overrides);
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedPlan { plan, root, source })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(p) = o.precision {
            self.precision = p;
        }
        if let Some(c) = o.charts {
            self.charts = c;
        }
    }

    pub fn check_command(&self, command: &str) -> Result<()> {
        match &self.command {
            Some(c) if c != command => bail!("plan is for `{c}`, not `{command}`"),
            _ => Ok(()),
        }
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.precision {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            p => bail!("precision must be 32 or 64, got {p}"),
        }
    }

    /// Network for samples of `sample_shape` (`[D]` or `[C, H, W]`).
    pub fn arch_for(&self, sample_shape: &[usize]) -> Result<ArchDescriptor> {
        let kind: ArchKind = self.arch.kind.parse()?;
        let (h, classes) = (&self.arch.hidden, self.data.class_count);
        let arch = match (kind, sample_shape) {
            (ArchKind::TinyCnn, &[c, hh, w]) => {
                ensure!(h.len() == 2, "tiny_cnn needs two channel counts in `arch.hidden`");
                ArchDescriptor::tiny_cnn([c, hh, w], [h[0], h[1]], classes)?
            }
            (ArchKind::TinyCnn, s) => bail!("tiny_cnn needs [C, H, W] samples, got {s:?}"),
            (_, &[d]) => {
                let mut widths = vec![d];
                widths.extend(h);
                widths.push(classes);
                if kind == ArchKind::Mlp {
                    ArchDescriptor::mlp(&widths)?
                } else {
                    ArchDescriptor::mlp_norm(&widths)?
                }
            }
            (_, s) => bail!("`{}` needs flat samples, got {s:?}", kind.as_str()),
        };
        Ok(arch)
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        let t = &self.train;
        match self.data.source {
            DataSource::Synthetic => AugmentSpec {
                jitter_std: t.jitter_std,
                ..AugmentSpec::vectors()
            },
            DataSource::Image => AugmentSpec {
                flip_prob: t.flip_prob,
                crop_pad: t.crop_pad,
                ..AugmentSpec::images()
            },
        }
    }

    pub fn bifurcation_plan(&self) -> BifurcationPlan {
        let b = &self.bifurcation;
        BifurcationPlan {
            stable_epochs: b.stable_epochs,
            checkpoint_interval: b.checkpoint_interval,
            decay_epochs: b.decay_epochs,
            branch_seeds: (b.branch_seeds[0], b.branch_seeds[1]),
            alpha: b.alpha,
            curve_points: b.curve_points,
            tau_rel: b.tau_rel,
            stats: match b.stats {
                StatsChoice::Interpolate => StatsPolicy::Interpolate,
                StatsChoice::Recompute => StatsPolicy::Recompute {
                    n_batches: b.stats_batches,
                    batch_size: b.stats_batch_size,
                },
            },
            include_init: b.include_init,
            fixed_budget: b.fixed_budget,
        }
    }

    pub fn base_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            momentum: self.train.momentum,
            warmup_epochs: self.train.warmup_epochs,
            precision: self.precision()?,
            checked: self.train.checked,
            ..TrainConfig::default()
        })
    }

    /// The sweep grid; every cell's configuration is validated here, before
    /// any training starts.
    pub fn sweep_plan(&self, arch: ArchDescriptor) -> Result<SweepPlan> {
        let t = &self.train;
        let plan = SweepPlan {
            arch,
            base: self.base_config()?,
            augment_spec: self.augment_spec(),
            grid: GridSpec {
                etas: t.eta.clone(),
                batch_sizes: t.batch_size.clone(),
                weight_decays: t.weight_decay.clone(),
                augment: t.augment.clone(),
                replicates: t.replicates,
            },
            bifurcation: self.bifurcation_plan(),
            seed: self.seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// The first grid cell, used by single-run commands.
    pub fn single_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let first = |ok: bool, what: &str| if ok { Ok(()) } else { Err(anyhow::anyhow!("`train.{what}` is empty")) };
        first(!t.eta.is_empty(), "eta")?;
        first(!t.batch_size.is_empty(), "batch_size")?;
        first(!t.weight_decay.is_empty(), "weight_decay")?;
        let augment = t.augment.first().copied().unwrap_or(false);
        let config = TrainConfig {
            lr: t.eta[0],
            batch_size: t.batch_size[0],
            weight_decay: t.weight_decay[0],
            augment: if augment { self.augment_spec() } else { AugmentSpec::disabled() },
            ..self.base_config()?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn eig_options(&self) -> EigOptions {
        let p = &self.probe;
        EigOptions {
            tol: p.hessian_tol,
            max_iters: p.hessian_max_iters,
            mode: match p.hvp {
                HvpChoice::Central => HvpMode::CentralDifference,
                HvpChoice::ForwardOverReverse => HvpMode::ForwardOverReverse,
            },
            seed: self.seed,
        }
    }
}

impl LoadedPlan {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn arch(&self, tasks: &[TaskData]) -> Result<ArchDescriptor> {
        self.plan.arch_for(tasks.first().context("no data")?.train.sample_shape())
    }

    /// One dataset per replicate. Synthetic data is redrawn per replicate;
    /// image files are shared.
    pub fn replicate_tasks(&self, replicates: u64) -> Result<Vec<TaskData>> {
        (0..replicates).map(|r| self.task(0, replicate_seed(self.plan.seed, "data", r))).collect()
    }

    /// Distinct synthetic tasks sharing one seed, for setting (a).
    pub fn multi_tasks(&self) -> Result<Vec<TaskData>> {
        let d = &self.plan.data;
        ensure!(d.source == DataSource::Synthetic, "setting (a) needs synthetic data");
        let seed = replicate_seed(self.plan.seed, "data", 0);
        (0..d.tasks as u64).map(|t| self.task(t, seed)).collect()
    }

    fn task(&self, task_id: u64, seed: u64) -> Result<TaskData> {
        let d = &self.plan.data;
        match d.source {
            DataSource::Synthetic => Ok(SyntheticSpec {
                cluster_std: d.cluster_std,
                center_radius: d.center_radius,
                ..SyntheticSpec::new(task_id, d.n_train, d.n_test, d.class_count, d.input_dim, seed)
            }
            .generate()?),
            DataSource::Image => {
                let load = |p: &Option<PathBuf>, what: &str, split| -> Result<_> {
                    let p = p.as_ref().with_context(|| format!("`data.{what}` is required for image data"))?;
                    Ok(read_image_binary(&self.resolve(p), Some(d.class_count), split)?)
                };
                Ok(TaskData {
                    train: load(&d.train_path, "train_path", Split::Train)?,
                    test: load(&d.test_path, "test_path", Split::Test)?,
                })
            }
        }
    }
}
