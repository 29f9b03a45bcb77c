use std::ops::Range;

use crate::error::{Error, Result};
use crate::nets::Layout;
use crate::tensor::Scalar;

/// Momentum buffer and step counter of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub momentum: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            momentum: vec![T::zero(); len],
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Index ranges that receive weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayMask {
    ranges: Vec<Range<usize>>,
}

impl DecayMask {
    /// Weights and normalization scales; biases and shifts are not decayed.
    pub fn from_layout(layout: &Layout) -> Self {
        let mut ranges: Vec<Range<usize>> = layout.segments.iter().filter(|s| s.decayed()).map(|s| s.range()).collect();
        ranges.sort_by_key(|r| r.start);
        Self { ranges }
    }

    pub fn all(len: usize) -> Self {
        Self { ranges: vec![0..len] }
    }

    pub fn none() -> Self {
        Self { ranges: Vec::new() }
    }
}

/// One SGD step with momentum and decoupled weight decay:
/// `v ← μ·v + g`, `θ ← θ − lr·v − lr·λ·θ` (the decay term only on masked entries).
///
/// With `checked`, a non-finite gradient aborts with the step index.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut OptimizerState<T>,
    hyper: &SgdHyper,
    decay: &DecayMask,
    checked: bool,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.momentum.len() {
        return Err(Error::Config(format!(
            "sgd_step length mismatch: {} params, {} grads, {} momentum",
            params.len(),
            grads.len(),
            state.momentum.len()
        )));
    }
    if checked && grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step: state.step });
    }
    let (lr, mu) = (T::from_f64(hyper.lr), T::from_f64(hyper.momentum));
    let shrink = T::from_f64(hyper.lr * hyper.weight_decay);
    let decay_on = hyper.weight_decay != 0.0;
    let n = params.len();
    let mut update = |range: Range<usize>, decayed: bool| {
        for i in range {
            let v = mu * state.momentum[i] + grads[i];
            state.momentum[i] = v;
            let old = params[i];
            params[i] = if decayed { old - lr * v - shrink * old } else { old - lr * v };
        }
    };
    let mut cursor = 0;
    for r in &decay.ranges {
        update(cursor..r.start, false);
        update(r.clone(), decay_on);
        cursor = r.end;
    }
    update(cursor..n, false);
    state.step += 1;
    Ok(())
}
