//! CSV tables emitted by the commands and read back by `report`.

use anyhow::{ensure, Context, Result};
use serde::Deserialize;

use mergelab::analysis::{CurvePoint, MergeReport, RunKey};
use mergelab::protocol::TaCurve;

use crate::io::fmt_num;

pub const MERGES_CSV: &str = "merges.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const TASK_ARITHMETIC_CSV: &str = "task_arithmetic.csv";

pub const MERGE_COLUMNS: [&str; 21] = [
    "config_id",
    "eta",
    "batch_size",
    "momentum",
    "weight_decay",
    "augment",
    "s_tilde",
    "checkpoint_epoch",
    "alpha",
    "loss_merged",
    "acc_merged",
    "loss_a",
    "acc_a",
    "loss_b",
    "acc_b",
    "gain_mean",
    "gain_a",
    "gain_b",
    "barrier",
    "transition",
    "diverged",
];

pub const CURVE_COLUMNS: [&str; 5] = ["config_id", "checkpoint_epoch", "alpha", "loss", "accuracy"];

pub const TA_COLUMNS: [&str; 8] = ["config_id", "eta", "batch_size", "s_tilde", "checkpoint_epoch", "alpha", "loss", "accuracy"];

/// One row of `merges.csv`.
#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct MergeRow {
    pub config_id: String,
    pub eta: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub s_tilde: f64,
    pub checkpoint_epoch: u64,
    pub alpha: f64,
    pub loss_merged: f64,
    pub acc_merged: f64,
    pub loss_a: f64,
    pub acc_a: f64,
    pub loss_b: f64,
    pub acc_b: f64,
    pub gain_mean: f64,
    pub gain_a: f64,
    pub gain_b: f64,
    pub barrier: f64,
    pub transition: String,
    pub diverged: bool,
}

impl MergeRow {
    pub fn from_report(r: &MergeReport) -> Self {
        Self {
            config_id: r.key.config_id.clone(),
            eta: r.key.eta,
            batch_size: r.key.batch_size,
            momentum: r.key.momentum,
            weight_decay: r.key.weight_decay,
            augment: r.key.augment,
            s_tilde: r.s_tilde(),
            checkpoint_epoch: r.checkpoint_epoch,
            alpha: r.alpha,
            loss_merged: r.merged.test.loss,
            acc_merged: r.merged.test.accuracy,
            loss_a: r.a.test.loss,
            acc_a: r.a.test.accuracy,
            loss_b: r.b.test.loss,
            acc_b: r.b.test.accuracy,
            gain_mean: r.gain_mean,
            gain_a: r.gain_a,
            gain_b: r.gain_b,
            barrier: r.transition.barrier,
            transition: r.transition.class.to_string(),
            diverged: r.diverged,
        }
    }

    /// Placeholder for a checkpoint the trunk never reached.
    pub fn unreached(key: &RunKey, checkpoint_epoch: u64, alpha: f64) -> Self {
        let nan = f64::NAN;
        Self {
            config_id: key.config_id.clone(),
            eta: key.eta,
            batch_size: key.batch_size,
            momentum: key.momentum,
            weight_decay: key.weight_decay,
            augment: key.augment,
            s_tilde: key.s_tilde(),
            checkpoint_epoch,
            alpha,
            loss_merged: nan,
            acc_merged: nan,
            loss_a: nan,
            acc_a: nan,
            loss_b: nan,
            acc_b: nan,
            gain_mean: nan,
            gain_a: nan,
            gain_b: nan,
            barrier: nan,
            transition: "flat".into(),
            diverged: true,
        }
    }

    pub fn key(&self) -> RunKey {
        RunKey {
            config_id: self.config_id.clone(),
            eta: self.eta,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            augment: self.augment,
        }
    }

    fn record(&self) -> Vec<String> {
        let n = fmt_num;
        vec![
            self.config_id.clone(),
            n(self.eta),
            self.batch_size.to_string(),
            n(self.momentum),
            n(self.weight_decay),
            self.augment.to_string(),
            n(self.s_tilde),
            self.checkpoint_epoch.to_string(),
            n(self.alpha),
            n(self.loss_merged),
            n(self.acc_merged),
            n(self.loss_a),
            n(self.acc_a),
            n(self.loss_b),
            n(self.acc_b),
            n(self.gain_mean),
            n(self.gain_a),
            n(self.gain_b),
            n(self.barrier),
            self.transition.clone(),
            self.diverged.to_string(),
        ]
    }
}

/// Interpolation curve point of one merge event.
#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct CurveRow {
    pub config_id: String,
    pub checkpoint_epoch: u64,
    pub alpha: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl CurveRow {
    pub fn from_point(config_id: &str, checkpoint_epoch: u64, p: &CurvePoint) -> Self {
        Self {
            config_id: config_id.into(),
            checkpoint_epoch,
            alpha: p.alpha,
            loss: p.loss,
            accuracy: p.accuracy,
        }
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.config_id.clone(),
            self.checkpoint_epoch.to_string(),
            fmt_num(self.alpha),
            fmt_num(self.loss),
            fmt_num(self.accuracy),
        ]
    }
}

/// Task-arithmetic probe point (setting (b)) of one checkpoint.
#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct TaRow {
    pub config_id: String,
    pub eta: f64,
    pub batch_size: usize,
    pub s_tilde: f64,
    pub checkpoint_epoch: u64,
    pub alpha: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl TaRow {
    pub fn from_curve(key: &RunKey, curve: &TaCurve) -> Vec<Self> {
        curve
            .points
            .iter()
            .map(|p| Self {
                config_id: key.config_id.clone(),
                eta: key.eta,
                batch_size: key.batch_size,
                s_tilde: key.s_tilde(),
                checkpoint_epoch: curve.checkpoint_epoch,
                alpha: p.alpha,
                loss: p.per_task.iter().map(|m| m.loss).sum::<f64>() / p.per_task.len() as f64,
                accuracy: p.mean_accuracy(),
            })
            .collect()
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.config_id.clone(),
            fmt_num(self.eta),
            self.batch_size.to_string(),
            fmt_num(self.s_tilde),
            self.checkpoint_epoch.to_string(),
            fmt_num(self.alpha),
            fmt_num(self.loss),
            fmt_num(self.accuracy),
        ]
    }
}

/// Anything that serializes to one CSV record under a fixed header.
pub trait Row {
    const COLUMNS: &'static [&'static str];
    fn to_record(&self) -> Vec<String>;
}

impl Row for MergeRow {
    const COLUMNS: &'static [&'static str] = &MERGE_COLUMNS;
    fn to_record(&self) -> Vec<String> {
        self.record()
    }
}

impl Row for CurveRow {
    const COLUMNS: &'static [&'static str] = &CURVE_COLUMNS;
    fn to_record(&self) -> Vec<String> {
        self.record()
    }
}

impl Row for TaRow {
    const COLUMNS: &'static [&'static str] = &TA_COLUMNS;
    fn to_record(&self) -> Vec<String> {
        self.record()
    }
}

pub fn to_csv<R: Row>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(R::COLUMNS)?;
    for r in rows {
        w.write_record(r.to_record())?;
    }
    w.into_inner().context("flushing csv")
}

/// Parses a table, insisting on the exact header.
pub fn from_csv<R: Row + for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    ensure!(header == R::COLUMNS, "unexpected columns {header:?}, want {:?}", R::COLUMNS);
    r.deserialize().map(|row| row.context("malformed csv row")).collect()
}

/// Generic headed table of pre-formatted cells.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().context("flushing csv")
}
