use crate::error::{Error, Result};

use super::median;

/// Number of logarithmic bins along the noise axis.
pub const COLLAPSE_BINS: usize = 8;

/// Median gain of one configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub eta: f64,
    pub batch_size: usize,
    pub s_tilde: f64,
    pub gain: f64,
}

/// Bin index of every value on `n` equal-width bins of `ln v` between the
/// smallest and largest value.
pub fn log_bins(values: &[f64], n: usize) -> Vec<usize> {
    let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logs.iter()
        .map(|&l| {
            if hi > lo {
                (((l - lo) / (hi - lo) * n as f64) as usize).min(n - 1)
            } else {
                0
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseScore {
    /// Ratio of the two mean within-bin variances; below 1 means `S̃` aligns
    /// the batch-size curves better than `η`.
    pub score: f64,
    pub var_s_tilde: f64,
    pub var_eta: f64,
    /// Bins that held at least two batch-size groups.
    pub bins_s_tilde: usize,
    pub bins_eta: usize,
}

/// Mean over bins of the variance of per-batch-size mean gains; `None` when
/// no bin holds two batch sizes.
fn binned_variance(points: &[SweepPoint], coord: impl Fn(&SweepPoint) -> f64) -> Option<(f64, usize)> {
    let bins = log_bins(&points.iter().map(&coord).collect::<Vec<_>>(), COLLAPSE_BINS);
    let mut total = 0.0;
    let mut used = 0;
    for b in 0..COLLAPSE_BINS {
        let mut groups: Vec<(usize, f64, usize)> = Vec::new();
        for (p, _) in points.iter().zip(&bins).filter(|(_, &i)| i == b) {
            match groups.iter_mut().find(|g| g.0 == p.batch_size) {
                Some(g) => {
                    g.1 += p.gain;
                    g.2 += 1;
                }
                None => groups.push((p.batch_size, p.gain, 1)),
            }
        }
        if groups.len() < 2 {
            continue;
        }
        let means: Vec<f64> = groups.iter().map(|g| g.1 / g.2 as f64).collect();
        let m = means.iter().sum::<f64>() / means.len() as f64;
        total += means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / means.len() as f64;
        used += 1;
    }
    (used > 0).then(|| (total / used as f64, used))
}

/// How much better `S̃` collapses the per-batch-size gain curves than `η`.
pub fn collapse_score(points: &[SweepPoint]) -> Result<CollapseScore> {
    let mut batch_sizes: Vec<usize> = points.iter().map(|p| p.batch_size).collect();
    batch_sizes.sort_unstable();
    batch_sizes.dedup();
    let mut etas: Vec<f64> = points.iter().map(|p| p.eta).collect();
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    if batch_sizes.len() < 2 || etas.len() < 3 {
        return Err(Error::Config(format!(
            "collapse needs at least 2 batch sizes and 3 learning rates, got {} and {}",
            batch_sizes.len(),
            etas.len()
        )));
    }
    let s = binned_variance(points, |p| p.s_tilde);
    let e = binned_variance(points, |p| p.eta);
    let ((var_s_tilde, bins_s_tilde), (var_eta, bins_eta)) = match (s, e) {
        (None, None) => return Err(Error::Config("no bin holds two batch sizes".into())),
        (s, e) => (s.unwrap_or((0.0, 0)), e.unwrap_or((0.0, 0))),
    };
    let score = match (var_s_tilde, var_eta) {
        (n, d) if d > 0.0 => n / d,
        (0.0, _) => 1.0,
        _ => f64::INFINITY,
    };
    Ok(CollapseScore {
        score,
        var_s_tilde,
        var_eta,
        bins_s_tilde,
        bins_eta,
    })
}

/// Interior peak test of the gain-vs-noise curve across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseCurvePeak {
    /// Geometric bin centers along `S̃`.
    pub centers: Vec<f64>,
    /// Seed-mean of the per-seed bin medians; `None` where some seed has no point.
    pub means: Vec<Option<f64>>,
    pub low_bin: usize,
    pub high_bin: usize,
    /// Best interior bin, if any bin lies strictly between the outer ones.
    pub peak_bin: Option<usize>,
    /// Mean paired excess over the low and high bins, and their standard errors.
    pub excess_low: f64,
    pub se_low: f64,
    pub excess_high: f64,
    pub se_high: f64,
    pub passed: bool,
}

fn mean_se(d: &[f64]) -> (f64, f64) {
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    if d.len() < 2 {
        return (m, 0.0);
    }
    let var = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Looks for an interior `S̃` bin whose median gain beats both the smallest
/// and the largest populated bin by at least one cross-seed standard error
/// of the paired per-seed difference.
///
/// `per_seed` holds the non-diverged configurations of every seed. Only bins
/// populated in every seed take part.
pub fn noise_curve_peak(per_seed: &[Vec<SweepPoint>]) -> Result<NoiseCurvePeak> {
    let all: Vec<f64> = per_seed.iter().flatten().map(|p| p.s_tilde).collect();
    if per_seed.is_empty() || all.is_empty() {
        return Err(Error::Config("noise curve needs at least one seed with points".into()));
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).ln();
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max).ln();
    let width = (hi - lo) / COLLAPSE_BINS as f64;
    let bin_of = |s: f64| {
        if hi > lo {
            (((s.ln() - lo) / (hi - lo) * COLLAPSE_BINS as f64) as usize).min(COLLAPSE_BINS - 1)
        } else {
            0
        }
    };
    let medians: Vec<Vec<Option<f64>>> = per_seed
        .iter()
        .map(|pts| {
            (0..COLLAPSE_BINS)
                .map(|b| median(&pts.iter().filter(|p| bin_of(p.s_tilde) == b).map(|p| p.gain).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    let means: Vec<Option<f64>> = (0..COLLAPSE_BINS)
        .map(|b| {
            let vals: Option<Vec<f64>> = medians.iter().map(|m| m[b]).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let common: Vec<usize> = (0..COLLAPSE_BINS).filter(|&b| means[b].is_some()).collect();
    let (low_bin, high_bin) = match (common.first(), common.last()) {
        (Some(&l), Some(&h)) => (l, h),
        _ => return Err(Error::Config("no noise bin is populated in every seed".into())),
    };
    let centers = (0..COLLAPSE_BINS).map(|b| (lo + (b as f64 + 0.5) * width).exp()).collect();
    let mut best: Option<(usize, (f64, f64), (f64, f64))> = None;
    for &b in common.iter().filter(|&&b| b != low_bin && b != high_bin) {
        let diff = |other: usize| mean_se(&medians.iter().map(|m| m[b].unwrap() - m[other].unwrap()).collect::<Vec<_>>());
        let (l, h) = (diff(low_bin), diff(high_bin));
        let slack = (l.0 - l.1).min(h.0 - h.1);
        if best.is_none_or(|(_, bl, bh)| slack > (bl.0 - bl.1).min(bh.0 - bh.1)) {
            best = Some((b, l, h));
        }
    }
    Ok(match best {
        Some((b, l, h)) => NoiseCurvePeak {
            centers,
            means,
            low_bin,
            high_bin,
            peak_bin: Some(b),
            excess_low: l.0,
            se_low: l.1,
            excess_high: h.0,
            se_high: h.1,
            passed: l.0 > 0.0 && h.0 > 0.0 && l.0 >= l.1 && h.0 >= h.1,
        },
        None => NoiseCurvePeak {
            centers,
            means,
            low_bin,
            high_bin,
            peak_bin: None,
            excess_low: 0.0,
            se_low: 0.0,
            excess_high: 0.0,
            se_high: 0.0,
            passed: false,
        },
    })
}
