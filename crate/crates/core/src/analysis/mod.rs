//! Derived quantities and landscape probes: gains, correlations, α-sweeps,
//! transition classes, loss planes, Hessian spectra and noise-curve collapse.

mod collapse;
mod hessian;
mod landscape;
mod transition;

pub use collapse::{collapse_score, log_bins, noise_curve_peak, CollapseScore, NoiseCurvePeak, SweepPoint, COLLAPSE_BINS};
pub use hessian::{hessian_top_eigs, EigOptions, Eigenpair};
pub use landscape::{alpha_grid, alpha_sweep, alpha_sweep_with, loss_plane, CurvePoint, LossPlane, PlaneGrid};
pub use transition::{classify_transition, transition_phases, PhaseSequence, Transition, TransitionClass, TAU_FLOOR, TAU_REL};

use crate::error::{Error, Result};
use crate::nets::EvalMetrics;
use crate::optim::{effective_noise, TrainConfig};

/// Which single-model metric a merged model is compared against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Baseline {
    /// Mean of the two endpoints.
    #[default]
    Mean,
    First,
    /// The larger of the two values.
    Max,
}

impl Baseline {
    pub fn of(self, singles: (f64, f64)) -> f64 {
        match self {
            Baseline::Mean => 0.5 * (singles.0 + singles.1),
            Baseline::First => singles.0,
            Baseline::Max => singles.0.max(singles.1),
        }
    }
}

/// `f(θ_merge) − f(θ_single)`; positive is better for accuracy-like metrics.
pub fn performance_gain(merged: f64, singles: (f64, f64), baseline: Baseline) -> f64 {
    merged - baseline.of(singles)
}

/// `L_merge − L_single`; negative is better.
pub fn loss_gain(merged: f64, singles: (f64, f64), baseline: Baseline) -> f64 {
    merged - baseline.of(singles)
}

/// Mean over tasks of the merged model's accuracy relative to the task's own model.
pub fn normalized_accuracy(merged: &[f64], singles: &[f64]) -> Result<f64> {
    if merged.is_empty() || merged.len() != singles.len() {
        return Err(Error::Config(format!(
            "normalized accuracy needs matching non-empty lists, got {} and {}",
            merged.len(),
            singles.len()
        )));
    }
    if singles.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("single-model accuracies must be positive".into()));
    }
    Ok(merged.iter().zip(singles).map(|(m, s)| m / s).sum::<f64>() / merged.len() as f64)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("pearson needs two equal-length lists of at least 2 values".into()));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Config("pearson is undefined for a constant list".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Hyperparameters that identify one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RunKey {
    pub config_id: String,
    pub eta: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
}

impl RunKey {
    pub fn new(config_id: impl Into<String>, config: &TrainConfig) -> Self {
        Self {
            config_id: config_id.into(),
            eta: config.lr,
            batch_size: config.batch_size,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            augment: config.augment.enabled,
        }
    }

    pub fn s_tilde(&self) -> f64 {
        effective_noise(self.eta, self.batch_size, self.momentum).unwrap_or(f64::NAN)
    }
}

/// Train and test evaluation of one model.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalPair {
    pub train: EvalMetrics,
    pub test: EvalMetrics,
}

/// Outcome of merging the two branch endpoints of one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeReport {
    pub key: RunKey,
    pub checkpoint_epoch: u64,
    pub alpha: f64,
    pub merged: EvalPair,
    pub a: EvalPair,
    pub b: EvalPair,
    /// Test-accuracy gains against the endpoint mean, endpoint A and endpoint B.
    pub gain_mean: f64,
    pub gain_a: f64,
    pub gain_b: f64,
    /// Interpolation curve between the endpoints.
    pub curve: Vec<CurvePoint>,
    pub transition: Transition,
    pub diverged: bool,
}

impl MergeReport {
    pub fn s_tilde(&self) -> f64 {
        self.key.s_tilde()
    }

    /// Fills in the gains from the test accuracies.
    pub fn with_gains(mut self) -> Self {
        let singles = (self.a.test.accuracy, self.b.test.accuracy);
        let merged = self.merged.test.accuracy;
        self.gain_mean = performance_gain(merged, singles, Baseline::Mean);
        self.gain_a = performance_gain(merged, singles, Baseline::First);
        self.gain_b = performance_gain(merged, (singles.1, singles.0), Baseline::First);
        self
    }
}

/// All merge events of a grid and their per-configuration aggregates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub reports: Vec<MergeReport>,
}

impl SweepResult {
    /// Median mean-baseline gain per configuration, in first-seen order.
    /// Diverged events are left out; a configuration with none left is skipped.
    pub fn median_gains(&self) -> Vec<(RunKey, f64)> {
        let mut keys: Vec<RunKey> = Vec::new();
        for r in &self.reports {
            if !keys.iter().any(|k| k.config_id == r.key.config_id) {
                keys.push(r.key.clone());
            }
        }
        keys.into_iter()
            .filter_map(|k| {
                let gains: Vec<f64> = self
                    .reports
                    .iter()
                    .filter(|r| r.key.config_id == k.config_id && !r.diverged)
                    .map(|r| r.gain_mean)
                    .collect();
                median(&gains).map(|m| (k, m))
            })
            .collect()
    }

    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        self.median_gains()
            .into_iter()
            .map(|(k, gain)| SweepPoint {
                eta: k.eta,
                batch_size: k.batch_size,
                s_tilde: k.s_tilde(),
                gain,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_examples() {
        let g = performance_gain(0.762, (0.750, 0.752), Baseline::Mean);
        assert!((g - 0.011).abs() < 1e-12);
        assert_eq!(performance_gain(0.75, (0.75, 0.75), Baseline::Mean), 0.0);
        assert!((performance_gain(0.762, (0.750, 0.752), Baseline::Max) - 0.010).abs() < 1e-12);
        assert!((performance_gain(0.762, (0.750, 0.752), Baseline::First) - 0.012).abs() < 1e-12);
        assert!(loss_gain(0.3, (0.5, 0.5), Baseline::Mean) < 0.0);
    }

    #[test]
    fn normalized_accuracy_examples() {
        assert_eq!(normalized_accuracy(&[0.8, 0.6], &[0.8, 0.6]).unwrap(), 1.0);
        assert_eq!(normalized_accuracy(&[0.5, 0.5], &[1.0, 0.5]).unwrap(), 0.75);
        assert_eq!(normalized_accuracy(&[0.0, 0.0], &[1.0, 0.5]).unwrap(), 0.0);
        assert!(normalized_accuracy(&[0.5], &[0.0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &down).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&xs, &[1.0; 4]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
