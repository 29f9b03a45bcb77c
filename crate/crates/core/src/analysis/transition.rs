use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Default relative threshold on the mean endpoint loss.
pub const TAU_REL: f64 = 0.05;
/// Absolute floor of the threshold.
pub const TAU_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransitionClass {
    Hill,
    Flat,
    Valley,
}

impl TransitionClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransitionClass::Hill => "hill",
            TransitionClass::Flat => "flat",
            TransitionClass::Valley => "valley",
        }
    }
}

impl fmt::Display for TransitionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransitionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hill" => Ok(TransitionClass::Hill),
            "flat" => Ok(TransitionClass::Flat),
            "valley" => Ok(TransitionClass::Valley),
            other => Err(Error::Config(format!("unknown transition class `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub class: TransitionClass,
    /// `max L(α) − max(L(0), L(1))`.
    pub barrier: f64,
    /// `min(L(0), L(1)) − min L(α)`.
    pub dip: f64,
    pub threshold: f64,
}

/// Classifies an interpolation loss curve given as `(α, L(α))` pairs.
///
/// The threshold is `max(τ_rel · mean(L(0), L(1)), 1e-3)`.
pub fn classify_transition(curve: &[(f64, f64)], tau_rel: f64) -> Result<Transition> {
    if curve.len() < 3 {
        return Err(Error::Config(format!("transition needs at least 3 points, got {}", curve.len())));
    }
    let at = |a: f64| {
        curve
            .iter()
            .find(|(x, _)| *x == a)
            .map(|p| p.1)
            .ok_or_else(|| Error::Config(format!("curve has no point at α = {a}")))
    };
    let (l0, l1) = (at(0.0)?, at(1.0)?);
    let max = curve.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let min = curve.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let barrier = max - l0.max(l1);
    let dip = l0.min(l1) - min;
    let threshold = (tau_rel * 0.5 * (l0 + l1)).max(TAU_FLOOR);
    let class = if barrier > threshold {
        TransitionClass::Hill
    } else if dip > threshold {
        TransitionClass::Valley
    } else {
        TransitionClass::Flat
    };
    Ok(Transition {
        class,
        barrier,
        dip,
        threshold,
    })
}

/// Class sequence along a trunk after a median-of-3 filter.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSequence {
    pub smoothed: Vec<TransitionClass>,
    /// Number of class changes in the smoothed sequence.
    pub changes: usize,
    /// Index of the first smoothed checkpoint that is no longer a hill, if
    /// the sequence starts with one.
    pub transition_index: Option<usize>,
}

fn rank(c: TransitionClass) -> u8 {
    match c {
        TransitionClass::Valley => 0,
        TransitionClass::Flat => 1,
        TransitionClass::Hill => 2,
    }
}

/// Median-of-3 smoothing over the ordering valley < flat < hill. The first
/// and last entries are kept as they are.
pub fn transition_phases(classes: &[TransitionClass]) -> PhaseSequence {
    let n = classes.len();
    let smoothed: Vec<TransitionClass> = (0..n)
        .map(|i| {
            if i == 0 || i + 1 == n {
                return classes[i];
            }
            let mut w = [classes[i - 1], classes[i], classes[i + 1]];
            w.sort_by_key(|&c| rank(c));
            w[1]
        })
        .collect();
    let changes = smoothed.windows(2).filter(|w| w[0] != w[1]).count();
    let transition_index = match smoothed.first() {
        Some(TransitionClass::Hill) => smoothed.iter().position(|&c| c != TransitionClass::Hill),
        _ => None,
    };
    PhaseSequence {
        smoothed,
        changes,
        transition_index,
    }
}
