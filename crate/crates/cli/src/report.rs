//! Aggregates the raw CSVs of a run into summary tables and charts.

use std::path::Path;

use anyhow::{Context, Result};

use mergelab::analysis::{
    collapse_score, median, noise_curve_peak, transition_phases, CollapseScore, NoiseCurvePeak, PhaseSequence, RunKey, SweepPoint,
    TransitionClass,
};

use crate::io::{fmt_num, OutDir};
use crate::results::{from_csv, table_csv, MergeRow, TaRow, MERGES_CSV, TASK_ARITHMETIC_CSV};
use crate::svg::{Heatmap, LineChart, Series};

/// Replicate index from a `c000-r2` style id; ids without a suffix are replicate 0.
pub fn replicate_of(config_id: &str) -> u64 {
    config_id
        .rsplit_once("-r")
        .and_then(|(_, r)| r.parse().ok())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigSummary {
    pub key: RunKey,
    pub replicate: u64,
    pub events: usize,
    pub diverged_events: usize,
    /// Median test-accuracy gain over non-diverged events.
    pub median_gain: Option<f64>,
    /// Median of `loss_merged − mean(loss_a, loss_b)`.
    pub median_loss_gain: Option<f64>,
    /// Median endpoint test accuracy.
    pub median_accuracy: Option<f64>,
    pub phases: PhaseSequence,
    pub epochs: Vec<u64>,
    pub transition_epoch: Option<u64>,
    /// Median over checkpoints of the task-arithmetic accuracy drop from α = 1.
    pub median_drop: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub configs: Vec<ConfigSummary>,
    pub collapse: Option<CollapseScore>,
    pub peak: Option<NoiseCurvePeak>,
}

impl Report {
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        self.configs.iter().filter_map(point).collect()
    }

    /// Non-diverged points per replicate, in replicate order.
    pub fn points_per_replicate(&self) -> Vec<Vec<SweepPoint>> {
        let reps = self.configs.iter().map(|c| c.replicate + 1).max().unwrap_or(0) as usize;
        let mut out = vec![Vec::new(); reps];
        for c in &self.configs {
            if let Some(p) = point(c) {
                out[c.replicate as usize].push(p);
            }
        }
        out
    }
}

/// Task-arithmetic drop of one learning rate within one replicate.
#[derive(Clone, Debug, PartialEq)]
pub struct EtaSharpness {
    pub replicate: u64,
    pub eta: f64,
    /// Mean over batch sizes of the per-configuration median drop.
    pub drop: Option<f64>,
    /// No cell diverged and every cell kept at least half of the replicate's
    /// best median endpoint accuracy.
    pub stable: bool,
}

impl Report {
    /// One row per (replicate, η), in replicate then ascending-η order.
    pub fn eta_sharpness(&self) -> Vec<EtaSharpness> {
        let mut out: Vec<EtaSharpness> = Vec::new();
        let reps = self.configs.iter().map(|c| c.replicate + 1).max().unwrap_or(0);
        for rep in 0..reps {
            let cells: Vec<&ConfigSummary> = self.configs.iter().filter(|c| c.replicate == rep).collect();
            let best = cells.iter().filter_map(|c| c.median_accuracy).fold(f64::NEG_INFINITY, f64::max);
            let mut etas: Vec<f64> = cells.iter().map(|c| c.key.eta).collect();
            etas.sort_by(f64::total_cmp);
            etas.dedup();
            for eta in etas {
                let group: Vec<&&ConfigSummary> = cells.iter().filter(|c| c.key.eta == eta).collect();
                let stable = group
                    .iter()
                    .all(|c| c.diverged_events == 0 && c.median_accuracy.is_some_and(|a| a >= 0.5 * best));
                let drops: Vec<f64> = group.iter().filter_map(|c| c.median_drop).collect();
                let drop = (drops.len() == group.len() && !drops.is_empty()).then(|| drops.iter().sum::<f64>() / drops.len() as f64);
                out.push(EtaSharpness { replicate: rep, eta, drop, stable });
            }
        }
        out
    }
}

fn point(c: &ConfigSummary) -> Option<SweepPoint> {
    c.median_gain.map(|gain| SweepPoint {
        eta: c.key.eta,
        batch_size: c.key.batch_size,
        s_tilde: c.key.s_tilde(),
        gain,
    })
}

/// Largest accuracy decrease from α = 1 along one checkpoint's probe.
pub fn accuracy_drop(points: &[(f64, f64)]) -> Option<f64> {
    let at_one = points.iter().find(|p| (p.0 - 1.0).abs() < 1e-9)?.1;
    let worst = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    Some((at_one - worst).max(0.0))
}

pub fn summarize(merges: &[MergeRow], ta: Option<&[TaRow]>) -> Result<Report> {
    let mut ids: Vec<&str> = Vec::new();
    for r in merges {
        if !ids.contains(&r.config_id.as_str()) {
            ids.push(&r.config_id);
        }
    }
    let mut configs = Vec::with_capacity(ids.len());
    for id in ids {
        let mut rows: Vec<&MergeRow> = merges.iter().filter(|r| r.config_id == id).collect();
        rows.sort_by_key(|r| r.checkpoint_epoch);
        let ok: Vec<&&MergeRow> = rows.iter().filter(|r| !r.diverged).collect();
        let classes = ok
            .iter()
            .map(|r| r.transition.parse::<TransitionClass>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("transition column of `{id}`"))?;
        let phases = transition_phases(&classes);
        let epochs: Vec<u64> = ok.iter().map(|r| r.checkpoint_epoch).collect();
        let median_drop = ta.and_then(|ta| {
            let mut by_epoch: Vec<(u64, Vec<(f64, f64)>)> = Vec::new();
            for t in ta.iter().filter(|t| t.config_id == id) {
                match by_epoch.iter_mut().find(|(e, _)| *e == t.checkpoint_epoch) {
                    Some((_, v)) => v.push((t.alpha, t.accuracy)),
                    None => by_epoch.push((t.checkpoint_epoch, vec![(t.alpha, t.accuracy)])),
                }
            }
            median(&by_epoch.iter().filter_map(|(_, v)| accuracy_drop(v)).collect::<Vec<_>>())
        });
        configs.push(ConfigSummary {
            key: rows[0].key(),
            replicate: replicate_of(id),
            events: rows.len(),
            diverged_events: rows.len() - ok.len(),
            median_gain: median(&ok.iter().map(|r| r.gain_mean).collect::<Vec<_>>()),
            median_loss_gain: median(&ok.iter().map(|r| r.loss_merged - 0.5 * (r.loss_a + r.loss_b)).collect::<Vec<_>>()),
            median_accuracy: median(&ok.iter().flat_map(|r| [r.acc_a, r.acc_b]).collect::<Vec<_>>()),
            transition_epoch: phases.transition_index.map(|i| epochs[i]),
            phases,
            epochs,
            median_drop,
        });
    }
    let mut report = Report {
        configs,
        collapse: None,
        peak: None,
    };
    report.collapse = collapse_score(&report.sweep_points()).ok();
    report.peak = noise_curve_peak(&report.points_per_replicate()).ok();
    Ok(report)
}

/// Reads the raw tables of `dir`.
pub fn load(dir: &Path) -> Result<Report> {
    let merges_path = dir.join(MERGES_CSV);
    let merges: Vec<MergeRow> = from_csv(&std::fs::read(&merges_path).with_context(|| format!("reading {}", merges_path.display()))?)?;
    let ta_path = dir.join(TASK_ARITHMETIC_CSV);
    let ta: Option<Vec<TaRow>> = if ta_path.exists() {
        Some(from_csv(&std::fs::read(&ta_path)?)?)
    } else {
        None
    };
    summarize(&merges, ta.as_deref())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".into(), fmt_num)
}

fn class_list(c: &[TransitionClass]) -> String {
    c.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(" ")
}

/// Writes the summary tables and, optionally, the charts.
pub fn write(out: &mut OutDir, report: &Report, charts: bool) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .configs
        .iter()
        .map(|c| {
            vec![
                c.key.config_id.clone(),
                fmt_num(c.key.eta),
                c.key.batch_size.to_string(),
                fmt_num(c.key.momentum),
                fmt_num(c.key.weight_decay),
                c.key.augment.to_string(),
                fmt_num(c.key.s_tilde()),
                c.events.to_string(),
                c.diverged_events.to_string(),
                opt(c.median_gain),
                opt(c.median_loss_gain),
                opt(c.median_accuracy),
                opt(c.median_drop),
            ]
        })
        .collect();
    out.write(
        "summary_gains.csv",
        &table_csv(
            &[
                "config_id",
                "eta",
                "batch_size",
                "momentum",
                "weight_decay",
                "augment",
                "s_tilde",
                "events",
                "diverged_events",
                "median_gain",
                "median_loss_gain",
                "median_accuracy",
                "median_ta_drop",
            ],
            &rows,
        )?,
    )?;

    let rows: Vec<Vec<String>> = report
        .configs
        .iter()
        .map(|c| {
            vec![
                c.key.config_id.clone(),
                fmt_num(c.key.eta),
                c.key.batch_size.to_string(),
                fmt_num(c.key.s_tilde()),
                c.epochs.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
                class_list(&c.phases.smoothed),
                c.phases.changes.to_string(),
                c.transition_epoch.map_or_else(String::new, |e| e.to_string()),
            ]
        })
        .collect();
    out.write(
        "transitions.csv",
        &table_csv(
            &["config_id", "eta", "batch_size", "s_tilde", "epochs", "smoothed_classes", "changes", "transition_epoch"],
            &rows,
        )?,
    )?;

    let mut rows = Vec::new();
    if let Some(c) = &report.collapse {
        rows.push(vec![
            fmt_num(c.score),
            fmt_num(c.var_s_tilde),
            fmt_num(c.var_eta),
            c.bins_s_tilde.to_string(),
            c.bins_eta.to_string(),
        ]);
    }
    out.write("collapse.csv", &table_csv(&["score", "var_s_tilde", "var_eta", "bins_s_tilde", "bins_eta"], &rows)?)?;

    let mut rows = Vec::new();
    if let Some(p) = &report.peak {
        for (b, (c, m)) in p.centers.iter().zip(&p.means).enumerate() {
            let role = if Some(b) == p.peak_bin {
                "peak"
            } else if b == p.low_bin {
                "low"
            } else if b == p.high_bin {
                "high"
            } else {
                ""
            };
            rows.push(vec![b.to_string(), fmt_num(*c), opt(*m), role.to_string()]);
        }
    }
    out.write("noise_curve.csv", &table_csv(&["bin", "s_tilde_center", "mean_median_gain", "role"], &rows)?)?;

    let rows: Vec<Vec<String>> = report
        .eta_sharpness()
        .iter()
        .map(|s| vec![s.replicate.to_string(), fmt_num(s.eta), opt(s.drop), s.stable.to_string()])
        .collect();
    out.write("ta_sharpness.csv", &table_csv(&["replicate", "eta", "mean_ta_drop", "stable"], &rows)?)?;

    if charts {
        write_charts(out, report)?;
    }
    Ok(())
}

/// Mean over replicates of a per-configuration value, keyed by (η, B).
fn by_eta_batch(report: &Report, value: impl Fn(&ConfigSummary) -> Option<f64>) -> Vec<(f64, usize, f64)> {
    let mut acc: Vec<(f64, usize, f64, usize)> = Vec::new();
    for c in &report.configs {
        let Some(v) = value(c) else { continue };
        match acc.iter_mut().find(|a| a.0 == c.key.eta && a.1 == c.key.batch_size) {
            Some(a) => {
                a.2 += v;
                a.3 += 1;
            }
            None => acc.push((c.key.eta, c.key.batch_size, v, 1)),
        }
    }
    acc.into_iter().map(|(e, b, s, n)| (e, b, s / n as f64)).collect()
}

fn write_charts(out: &mut OutDir, report: &Report) -> Result<()> {
    let momentum = report.configs.first().map_or(0.0, |c| c.key.momentum);
    let mut batches: Vec<usize> = report.configs.iter().map(|c| c.key.batch_size).collect();
    batches.sort_unstable();
    batches.dedup();
    let mut etas: Vec<f64> = report.configs.iter().map(|c| c.key.eta).collect();
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    let noise = |e: f64, b: usize| e / (b as f64 * (1.0 - momentum).powi(2));

    let charts: [(&str, &str, fn(&ConfigSummary) -> Option<f64>); 3] = [
        ("gain_vs_noise.svg", "median accuracy gain", |c| c.median_gain),
        ("loss_gain_vs_noise.svg", "median loss gain", |c| c.median_loss_gain),
        ("ta_drop_vs_noise.svg", "task-arithmetic accuracy drop", |c| c.median_drop),
    ];
    for (file, label, value) in charts {
        let cells = by_eta_batch(report, value);
        if cells.is_empty() {
            continue;
        }
        let series = batches
            .iter()
            .map(|&b| Series {
                label: format!("B = {b}"),
                points: cells.iter().filter(|c| c.1 == b).map(|c| (noise(c.0, b), c.2)).collect(),
            })
            .collect();
        let chart = LineChart {
            title: format!("{label} vs effective noise"),
            x_label: "effective noise η / (B (1 − μ)²)".into(),
            y_label: label.into(),
            log_x: true,
            series,
        };
        out.write(file, chart.render().as_bytes())?;
    }

    let cells = by_eta_batch(report, |c| c.median_gain);
    let values = batches
        .iter()
        .map(|&b| {
            etas.iter()
                .map(|&e| cells.iter().find(|c| c.0 == e && c.1 == b).map_or(f64::NAN, |c| c.2))
                .collect()
        })
        .collect();
    let heat = Heatmap {
        title: "median accuracy gain".into(),
        x_label: "learning rate η".into(),
        y_label: "batch size B".into(),
        x_ticks: etas.iter().map(|&e| fmt_num(e)).collect(),
        y_ticks: batches.iter().map(|b| b.to_string()).collect(),
        values,
    };
    out.write("gain_heatmap.svg", heat.render().as_bytes())?;
    Ok(())
}
