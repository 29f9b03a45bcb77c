use rand::seq::index;

use crate::data::{augment, AugmentSpec, Dataset};
use crate::error::{Error, Result};
use crate::nets::{loss_and_grad, ForwardOptions, ParamVector, Precision, Role};
use crate::rng::RngStream;
use crate::tensor::Scalar;

/// `S̃ = η / (B (1 − μ)²)`.
pub fn effective_noise(lr: f64, batch_size: usize, momentum: f64) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    let damping = 1.0 - momentum;
    Ok(lr / (batch_size as f64 * damping * damping))
}

/// Effective learning rate of one scale-invariant weight group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupLr {
    pub group: String,
    pub norm_sq: f64,
    /// `η / ‖θ_g‖²`; `+inf` for a zero-norm group.
    pub lr: f64,
}

/// `η / ‖θ_g‖²` for every weight tensor that feeds a normalization layer.
pub fn effective_lr(params: &ParamVector, lr: f64) -> Vec<GroupLr> {
    params
        .arch()
        .layout()
        .segments
        .iter()
        .filter(|s| s.role == Role::Weight { normalized: true })
        .map(|s| {
            let norm_sq: f64 = params.values()[s.range()].iter().map(|&v| (v as f64) * (v as f64)).sum();
            let lr = if norm_sq > 0.0 { lr / norm_sq } else { f64::INFINITY };
            GroupLr {
                group: s.name.clone(),
                norm_sq,
                lr,
            }
        })
        .collect()
}

/// Unbiased estimate of `tr Σ` from per-example gradients:
/// `1/(n−1) Σᵢ ‖gᵢ − ḡ‖²` over `n_samples` examples drawn without replacement.
///
/// Gradients are taken in eval mode (fixed running statistics), so each
/// example's gradient is defined on its own. With an enabled `augment`, every
/// example is transformed independently first, which estimates `tr Σ_A`.
pub fn gradient_noise_trace(
    params: &ParamVector,
    data: &Dataset,
    n_samples: usize,
    rng: &mut RngStream,
    augment_spec: &AugmentSpec,
    precision: Precision,
) -> Result<f64> {
    if n_samples < 2 {
        return Err(Error::Config("gradient noise needs at least 2 samples".into()));
    }
    if n_samples > data.len() {
        return Err(Error::Data(format!(
            "{n_samples} samples requested from a dataset of {}",
            data.len()
        )));
    }
    let picks = index::sample(rng, data.len(), n_samples).into_vec();
    let mut grads = Vec::with_capacity(n_samples);
    for &i in &picks {
        let one = data.subset(&[i]);
        let x = augment(one.inputs(), augment_spec, rng)?;
        let g = match precision {
            Precision::F32 => example_grad::<f32>(params, &x, one.labels())?,
            Precision::F64 => example_grad::<f64>(params, &x, one.labels())?,
        };
        grads.push(g);
    }
    let dim = params.len();
    let mut mean = vec![0.0; dim];
    for g in &grads {
        mean.iter_mut().zip(g).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n_samples as f64);
    let ss: f64 = grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum();
    Ok(ss / (n_samples - 1) as f64)
}

fn example_grad<T: Scalar>(params: &ParamVector, x: &crate::tensor::Tensor<f32>, labels: &[usize]) -> Result<Vec<f64>> {
    let out = loss_and_grad(
        params.arch(),
        &params.values_as::<T>(),
        &params.aux_as::<T>(),
        &x.cast::<T>(),
        labels,
        ForwardOptions::eval(),
    )?;
    Ok(out.grad.iter().map(|g| g.primal()).collect())
}
