//! The subcommands. Each returns the run status that decides the exit code.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};

use mergelab::analysis::{alpha_grid, alpha_sweep, hessian_top_eigs, loss_plane};
use mergelab::data::{steps_per_epoch, TaskData};
use mergelab::merge::{task_arithmetic_merge, task_vector, MergeSpec};
use mergelab::nets::{evaluate, NetworkObjective, ParamVector, Precision};
use mergelab::optim::{lr_at, ScheduleSpec, TrainConfig};
use mergelab::parallel;
use mergelab::protocol::{
    run_fingerprint, run_setting_a, run_sweep, setting_b, task_arithmetic_curve, BifurcationOutcome, Checkpoint, GridSpec, RunStreams,
    SettingAPlan, SweepCell, SweepPlan, TaCurve, Trainer,
};
use mergelab::tensor::Scalar;

use crate::io::{fmt_num, Failure, Manifest, OutDir, Status};
use crate::plan::{LoadedPlan, MergeChoice};
use crate::report;
use crate::results::{to_csv, table_csv, CurveRow, MergeRow, TaRow, CURVES_CSV, MERGES_CSV, TASK_ARITHMETIC_CSV};
use crate::svg::Heatmap;

/// Where a command writes: `--out`, else the plan's `out` (relative to the plan file).
pub fn out_dir(plan: &LoadedPlan, flag: Option<&Path>) -> Result<PathBuf> {
    match (flag, &plan.plan.out) {
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(p)) => Ok(plan.resolve(p)),
        (None, None) => bail!("no output directory: pass --out or set `out` in the plan"),
    }
}

fn finish(out: OutDir, command: &str, plan: &LoadedPlan, diverged: Vec<String>, failures: Vec<Failure>, status: Status) -> Result<Manifest> {
    out.finish(command, plan.plan.seed, &plan.source, diverged, failures, status)
}

/// Model file of a bare parameter vector: no momentum, step 0.
fn model_checkpoint(params: &ParamVector, config_hash: u64) -> Checkpoint {
    Checkpoint {
        momentum: vec![0.0; params.len()],
        params: params.clone(),
        step: 0,
        data_rng: [0; 4],
        augment_rng: [0; 4],
        config_hash,
    }
}

fn load_model(plan: &LoadedPlan, path: &Path) -> Result<ParamVector> {
    let p = plan.resolve(path);
    Ok(Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?.params)
}

// ---------------------------------------------------------------- train

pub fn train(plan: &LoadedPlan, out: &Path) -> Result<Manifest> {
    plan.plan.check_command("train")?;
    let config = plan.plan.single_config()?;
    let tasks = plan.replicate_tasks(1)?;
    let arch = plan.arch(&tasks)?;
    let t = &plan.plan.train;
    ensure!(t.epochs >= 1 && t.warmup_epochs <= t.epochs, "need 1 <= epochs and warmup_epochs <= epochs");
    let mut dir = OutDir::create(out)?;
    let log = parallel::with_workers(plan.plan.workers, || match config.precision {
        Precision::F32 => train_as::<f32>(plan, &config, &arch, &tasks[0]),
        Precision::F64 => train_as::<f64>(plan, &config, &arch, &tasks[0]),
    })?;
    dir.write(
        "train_log.csv",
        &table_csv(&["epoch", "lr", "mean_batch_loss", "train_loss", "train_acc", "test_loss", "test_acc"], &log.rows)?,
    )?;
    if let Some(ckpt) = &log.checkpoint {
        dir.write("model.ckpt", &ckpt.encode())?;
    }
    let (diverged, status) = match log.diverged_at {
        Some(step) => (vec![format!("step {step}")], Status::Partial),
        None => (vec![], Status::Ok),
    };
    finish(dir, "train", plan, diverged, vec![], status)
}

struct TrainLog {
    rows: Vec<Vec<String>>,
    checkpoint: Option<Checkpoint>,
    diverged_at: Option<u64>,
}

fn train_as<T: Scalar>(plan: &LoadedPlan, config: &TrainConfig, arch: &mergelab::nets::ArchDescriptor, task: &TaskData) -> Result<TrainLog> {
    let t = &plan.plan.train;
    let seed = plan.plan.seed;
    let spe = steps_per_epoch(task.train.len(), config.batch_size) as u64;
    let schedule = ScheduleSpec {
        warmup_steps: t.warmup_epochs * spe,
        stable_steps: (t.epochs - t.warmup_epochs) * spe,
        decay_steps: t.decay_epochs * spe,
    };
    let init = ParamVector::build(arch, seed)?;
    let mut trainer = Trainer::<T>::new(&init, config, schedule, &task.train, RunStreams::derive(seed, "train", 0), run_fingerprint(arch, config, seed))?;
    let mut rows = Vec::new();
    for epoch in 1..=t.epochs + t.decay_epochs {
        let s = trainer.run_epochs(1)?;
        if s.diverged_at.is_some() {
            return Ok(TrainLog {
                rows,
                checkpoint: None,
                diverged_at: s.diverged_at,
            });
        }
        let params = trainer.params()?;
        let (tr, te) = (evaluate(&params, &task.train, config.precision)?, evaluate(&params, &task.test, config.precision)?);
        let lr = lr_at(&schedule, config.lr, trainer.step_count().saturating_sub(1));
        rows.push(vec![
            epoch.to_string(),
            fmt_num(lr),
            fmt_num(s.mean_loss),
            fmt_num(tr.loss),
            fmt_num(tr.accuracy),
            fmt_num(te.loss),
            fmt_num(te.accuracy),
        ]);
    }
    Ok(TrainLog {
        rows,
        checkpoint: Some(trainer.checkpoint()?),
        diverged_at: None,
    })
}

// ---------------------------------------------------------------- sweep

/// What a finished grid cell contributes to the output.
struct CellOutput {
    merges: Vec<MergeRow>,
    curves: Vec<CurveRow>,
    ta: Vec<TaRow>,
    files: Vec<(String, Vec<u8>)>,
    diverged: bool,
}

fn cell_output(plan: &LoadedPlan, sweep: &SweepPlan, cell: &SweepCell, task: &TaskData, out: BifurcationOutcome, save: bool) -> mergelab::Result<CellOutput> {
    let key = cell.key();
    let a = &plan.plan.analysis;
    let ta: Vec<TaCurve> = if a.task_arithmetic {
        setting_b(&out, task, &alpha_grid(0.0, a.ta_alpha_max, a.ta_points), cell.config.precision)?
    } else {
        Vec::new()
    };
    let mut merges: Vec<MergeRow> = out.reports.iter().map(MergeRow::from_report).collect();
    for &epoch in &sweep.bifurcation.checkpoint_epochs()[merges.len()..] {
        merges.push(MergeRow::unreached(&key, epoch, sweep.bifurcation.alpha));
    }
    let curves = out
        .reports
        .iter()
        .flat_map(|r| r.curve.iter().map(|p| CurveRow::from_point(&key.config_id, r.checkpoint_epoch, p)))
        .collect();
    let mut files = Vec::new();
    if save {
        let hash = run_fingerprint(&sweep.arch, &cell.config, cell.seed);
        let dir = format!("checkpoints/{}", key.config_id);
        for (i, (ckpt, (ba, bb))) in out.trunk.checkpoints.iter().zip(&out.branches).enumerate() {
            let epoch = out.checkpoint_epoch(i);
            files.push((format!("{dir}/trunk-e{epoch:03}.ckpt"), ckpt.encode()));
            for (name, b) in [("a", ba), ("b", bb)] {
                if let Some(p) = &b.params {
                    files.push((format!("{dir}/branch-{name}-e{epoch:03}.ckpt"), model_checkpoint(p, hash).encode()));
                }
            }
        }
    }
    Ok(CellOutput {
        diverged: out.diverged() || merges.iter().any(|m| m.diverged),
        merges,
        curves,
        ta: ta.iter().flat_map(|c| TaRow::from_curve(&key, c)).collect(),
        files,
    })
}

fn run_grid(plan: &LoadedPlan, sweep: &SweepPlan, tasks: &[TaskData], command: &str, out: &Path, save: bool) -> Result<Manifest> {
    let results = parallel::with_workers(plan.plan.workers, || {
        run_sweep(sweep, tasks, |cell, task, o| cell_output(plan, sweep, cell, task, o, save))
    })?;
    let mut dir = OutDir::create(out)?;
    let (mut merges, mut curves, mut ta) = (Vec::new(), Vec::new(), Vec::new());
    let (mut diverged, mut failures) = (Vec::new(), Vec::new());
    let total = results.len();
    for (cell, r) in results {
        match r {
            Ok(o) => {
                if o.diverged {
                    diverged.push(cell.config_id());
                }
                merges.extend(o.merges);
                curves.extend(o.curves);
                ta.extend(o.ta);
                for (path, bytes) in o.files {
                    dir.write(&path, &bytes)?;
                }
            }
            Err(e) => failures.push(Failure {
                config_id: cell.config_id(),
                error: e.to_string(),
            }),
        }
    }
    dir.write(MERGES_CSV, &to_csv(&merges)?)?;
    dir.write(CURVES_CSV, &to_csv(&curves)?)?;
    if plan.plan.analysis.task_arithmetic {
        dir.write(TASK_ARITHMETIC_CSV, &to_csv(&ta)?)?;
    }
    let status = if failures.len() == total {
        Status::Failed
    } else if failures.is_empty() && diverged.is_empty() {
        Status::Ok
    } else {
        Status::Partial
    };
    finish(dir, command, plan, diverged, failures, status)
}

pub fn sweep(plan: &LoadedPlan, out: &Path) -> Result<Manifest> {
    plan.plan.check_command("sweep")?;
    let tasks = plan.replicate_tasks(plan.plan.train.replicates.max(1))?;
    let sweep = plan.plan.sweep_plan(plan.arch(&tasks)?)?;
    run_grid(plan, &sweep, &tasks, "sweep", out, plan.plan.bifurcation.save_checkpoints)
}

pub fn bifurcate(plan: &LoadedPlan, out: &Path) -> Result<Manifest> {
    plan.plan.check_command("bifurcate")?;
    let config = plan.plan.single_config()?;
    let tasks = plan.replicate_tasks(1)?;
    let mut sweep = plan.plan.sweep_plan(plan.arch(&tasks)?)?;
    sweep.grid = GridSpec {
        etas: vec![config.lr],
        batch_sizes: vec![config.batch_size],
        weight_decays: vec![config.weight_decay],
        augment: vec![config.augment.enabled],
        replicates: 1,
    };
    run_grid(plan, &sweep, &tasks, "bifurcate", out, true)
}

// ---------------------------------------------------------------- probes

pub fn merge(plan: &LoadedPlan, out: &Path) -> Result<Manifest> {
    plan.plan.check_command("merge")?;
    let p = &plan.plan.probe;
    let precision = plan.plan.precision()?;
    let mut dir = OutDir::create(out)?;
    if p.method == MergeChoice::TaskArithmetic && p.models.is_empty() {
        setting_a(plan, &mut dir)?;
        return finish(dir, "merge", plan, vec![], vec![], Status::Ok);
    }
    let task = plan.replicate_tasks(1)?.remove(0);
    let models = p.models.iter().map(|m| load_model(plan, m)).collect::<Result<Vec<_>>>()?;
    let grid = alpha_grid(p.alpha_min, p.alpha_max, p.points);
    parallel::with_workers(plan.plan.workers, || -> Result<()> {
        match p.method {
            MergeChoice::Linear => {
                ensure!(models.len() == 2, "linear merging takes exactly two models, got {}", models.len());
                let merged = MergeSpec::linear(p.alpha)
                    .with_stats(plan.plan.bifurcation_plan().stats)
                    .apply(None, &[&models[0], &models[1]], Some(&task.train))?;
                let train = alpha_sweep(&models[0], &models[1], &grid, &task.train, precision)?;
                let test = alpha_sweep(&models[0], &models[1], &grid, &task.test, precision)?;
                let rows: Vec<Vec<String>> = train
                    .iter()
                    .zip(&test)
                    .map(|(a, b)| vec![fmt_num(a.alpha), fmt_num(a.loss), fmt_num(a.accuracy), fmt_num(b.loss), fmt_num(b.accuracy)])
                    .collect();
                dir.write("merge_curve.csv", &table_csv(&["alpha", "train_loss", "train_acc", "test_loss", "test_acc"], &rows)?)?;
                dir.write("merged.ckpt", &model_checkpoint(&merged, 0).encode())?;
            }
            MergeChoice::TaskArithmetic => {
                let base = load_model(plan, p.base.as_deref().context("task arithmetic needs `probe.base`")?)?;
                ensure!(!models.is_empty(), "task arithmetic needs at least one model");
                let coeffs = if p.coeffs.is_empty() { vec![p.alpha; models.len()] } else { p.coeffs.clone() };
                let vectors = models.iter().map(|m| task_vector(m, &base)).collect::<mergelab::Result<Vec<_>>>()?;
                let merged = task_arithmetic_merge(&base, &vectors, &coeffs)?;
                let refs: Vec<&ParamVector> = models.iter().collect();
                let curve = task_arithmetic_curve(&base, &refs, &grid, &[&task.test], None, precision)?;
                let rows: Vec<Vec<String>> = curve
                    .iter()
                    .map(|c| vec![fmt_num(c.alpha), fmt_num(c.per_task[0].loss), fmt_num(c.per_task[0].accuracy)])
                    .collect();
                dir.write("merge_curve.csv", &table_csv(&["alpha", "test_loss", "test_acc"], &rows)?)?;
                dir.write("merged.ckpt", &model_checkpoint(&merged, 0).encode())?;
            }
        }
        Ok(())
    })?;
    finish(dir, "merge", plan, vec![], vec![], Status::Ok)
}

/// Setting (a): multi-task pretraining, per-task finetuning, task arithmetic.
fn setting_a(plan: &LoadedPlan, dir: &mut OutDir) -> Result<()> {
    let tasks = plan.multi_tasks()?;
    let arch = plan.arch(&tasks)?;
    let config = plan.plan.single_config()?;
    let a = &plan.plan.analysis;
    let p = &plan.plan.probe;
    let res = parallel::with_workers(plan.plan.workers, || {
        run_setting_a(
            &arch,
            &config,
            &tasks,
            &SettingAPlan {
                pretrain_epochs: a.pretrain_epochs,
                finetune_epochs: a.finetune_epochs,
            },
            &alpha_grid(p.alpha_min, p.alpha_max, p.points),
            plan.plan.seed,
        )
    })?;
    let mut header = vec!["alpha".to_string()];
    header.extend((0..tasks.len()).map(|t| format!("acc_task{t}")));
    header.push("normalized_accuracy".into());
    let rows: Vec<Vec<String>> = res
        .curve
        .iter()
        .map(|pt| {
            let mut r = vec![fmt_num(pt.alpha)];
            r.extend(pt.per_task.iter().map(|m| fmt_num(m.accuracy)));
            r.push(pt.normalized_accuracy.map_or_else(|| "NaN".into(), fmt_num));
            r
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    dir.write("setting_a.csv", &table_csv(&header, &rows)?)?;
    dir.write("base.ckpt", &model_checkpoint(&res.base, 0).encode())?;
    for (i, m) in res.finetuned.iter().enumerate() {
        dir.write(&format!("finetuned-task{i}.ckpt"), &model_checkpoint(m, 0).encode())?;
    }
    Ok(())
}

pub fn hessian(plan: &LoadedPlan, out: &Path) -> Result<Manifest> {
    plan.plan.check_command("hessian")?;
    let p = &plan.plan.probe;
    let model = load_model(plan, p.model.as_deref().context("hessian needs `probe.model`")?)?;
    let task = plan.replicate_tasks(1)?.remove(0);
    let n = p.hessian_samples.min(task.train.len());
    ensure!(n > 0, "hessian needs at least one sample");
    let probe = task.train.head(n);
    let obj = NetworkObjective::new(&model, probe.inputs(), probe.labels())?;
    let eigs = parallel::with_workers(plan.plan.workers, || hessian_top_eigs(&obj, &model.values_as::<f64>(), p.hessian_k, &plan.plan.eig_options()))?;
    let rows: Vec<Vec<String>> = eigs
        .iter()
        .enumerate()
        .map(|(i, e)| vec![(i + 1).to_string(), fmt_num(e.value), e.converged.to_string(), e.iterations.to_string()])
        .collect();
    let mut dir = OutDir::create(out)?;
    dir.write("hessian.csv", &table_csv(&["rank", "eigenvalue", "converged", "iterations"], &rows)?)?;
    let status = if eigs.len() == p.hessian_k && eigs.iter().all(|e| e.converged) {
        Status::Ok
    } else {
        Status::Partial
    };
    finish(dir, "hessian", plan, vec![], vec![], status)
}

pub fn slice(plan: &LoadedPlan, out: &Path) -> Result<Manifest> {
    plan.plan.check_command("slice")?;
    let p = &plan.plan.probe;
    let base = load_model(plan, p.base.as_deref().context("slice needs `probe.base`")?)?;
    ensure!(p.models.len() == 2, "slice needs exactly two `probe.models`");
    let (a, b) = (load_model(plan, &p.models[0])?, load_model(plan, &p.models[1])?);
    let task = plan.replicate_tasks(1)?.remove(0);
    let precision = plan.plan.precision()?;
    let plane = parallel::with_workers(plan.plan.workers, || loss_plane(&base, &a, &b, None, p.resolution, &task.test, precision))?;
    let mut rows = Vec::new();
    for (j, &y) in plane.ys.iter().enumerate() {
        for (i, &x) in plane.xs.iter().enumerate() {
            rows.push(vec![fmt_num(x), fmt_num(y), fmt_num(plane.losses[j * plane.xs.len() + i])]);
        }
    }
    let mut dir = OutDir::create(out)?;
    dir.write("slice.csv", &table_csv(&["x", "y", "loss"], &rows)?)?;
    let anchors: Vec<Vec<String>> = ["base", "a", "b"]
        .iter()
        .zip(plane.anchors)
        .map(|(n, (x, y))| vec![n.to_string(), fmt_num(x), fmt_num(y)])
        .collect();
    dir.write("slice_anchors.csv", &table_csv(&["model", "x", "y"], &anchors)?)?;
    if plan.plan.charts {
        let heat = Heatmap {
            title: "test loss on the plane through base, A and B".into(),
            x_label: "x (along A − base)".into(),
            y_label: "y".into(),
            x_ticks: plane.xs.iter().map(|&x| format!("{x:.2}")).collect(),
            y_ticks: plane.ys.iter().map(|&y| format!("{y:.2}")).collect(),
            values: plane.losses.chunks(plane.xs.len()).map(<[f64]>::to_vec).collect(),
        };
        dir.write("slice.svg", heat.render().as_bytes())?;
    }
    finish(dir, "slice", plan, vec![], vec![], Status::Ok)
}

// ---------------------------------------------------------------- report

/// Summaries from the CSVs in `dir`; writes next to them.
pub fn report(dir: &Path, charts: bool, plan_source: &str, seed: u64) -> Result<Manifest> {
    let summary = report::load(dir)?;
    let mut out = OutDir::create(&dir.join("report"))?;
    report::write(&mut out, &summary, charts)?;
    out.finish("report", seed, plan_source, vec![], vec![], Status::Ok)
}
