//! Parameter-space merging: linear interpolation, task arithmetic and
//! normalization-statistics policies.
//!
//! All arithmetic is carried out in f64 and rounded to f32 once per entry.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{batch_statistics, ArchDescriptor, ParamVector, MIN_VARIANCE, NORM_EPS};

/// Interpolation weights are snapped to this grid so that the weight pair of
/// `α` and of `1 − α` are exact mirror images.
const ALPHA_GRID: f64 = (1u64 << 32) as f64;

/// How running statistics of a merged normalization network are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StatsPolicy {
    /// Combine the statistics with the same coefficients as the weights.
    #[default]
    Interpolate,
    /// Re-estimate them from data after merging.
    Recompute { n_batches: usize, batch_size: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum MergeMethod {
    Linear { alpha: f64 },
    TaskArithmetic { coeffs: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeSpec {
    pub method: MergeMethod,
    pub stats: StatsPolicy,
}

impl MergeSpec {
    pub fn linear(alpha: f64) -> Self {
        Self {
            method: MergeMethod::Linear { alpha },
            stats: StatsPolicy::Interpolate,
        }
    }

    pub fn task_arithmetic(coeffs: Vec<f64>) -> Self {
        Self {
            method: MergeMethod::TaskArithmetic { coeffs },
            stats: StatsPolicy::Interpolate,
        }
    }

    pub fn with_stats(mut self, stats: StatsPolicy) -> Self {
        self.stats = stats;
        self
    }

    /// Merges `models`. Linear merging takes exactly two endpoints; task
    /// arithmetic takes the finetuned models and needs `base`.
    /// `stats_data` is required by [`StatsPolicy::Recompute`].
    pub fn apply(&self, base: Option<&ParamVector>, models: &[&ParamVector], stats_data: Option<&Dataset>) -> Result<ParamVector> {
        let merged = match &self.method {
            MergeMethod::Linear { alpha } => {
                let [a, b] = models else {
                    return Err(Error::Config(format!("linear merge needs 2 models, got {}", models.len())));
                };
                linear_interpolate(a, b, *alpha)?
            }
            MergeMethod::TaskArithmetic { coeffs } => {
                let base = base.ok_or_else(|| Error::Config("task arithmetic needs a base model".into()))?;
                let vectors = models.iter().map(|m| task_vector(m, base)).collect::<Result<Vec<_>>>()?;
                task_arithmetic_merge(base, &vectors, coeffs)?
            }
        };
        match self.stats {
            StatsPolicy::Interpolate => Ok(merged),
            StatsPolicy::Recompute { n_batches, batch_size } => {
                let data = stats_data.ok_or_else(|| Error::Config("statistics recomputation needs data".into()))?;
                recompute_statistics(&merged, data, n_batches, batch_size)
            }
        }
    }
}

fn weights(alpha: f64) -> Result<(f64, f64)> {
    if !alpha.is_finite() {
        return Err(Error::Config(format!("merge coefficient must be finite, got {alpha}")));
    }
    let k = (alpha * ALPHA_GRID).round();
    Ok(((ALPHA_GRID - k) / ALPHA_GRID, k / ALPHA_GRID))
}

fn clamp_variances(arch: &ArchDescriptor, aux: &mut [f32]) {
    let layout = arch.layout();
    for (i, &c) in layout.norm_channels.iter().enumerate() {
        let off = layout.aux_offset(i) + c;
        aux[off..off + c].iter_mut().for_each(|v| *v = v.max(MIN_VARIANCE));
    }
}

/// `(1 − α)·θ_A + α·θ_B` over trainable values and running statistics.
///
/// `α` outside `[0, 1]` extrapolates; this is meant for landscape probes.
pub fn linear_interpolate(a: &ParamVector, b: &ParamVector, alpha: f64) -> Result<ParamVector> {
    a.ensure_compatible(b)?;
    let (wa, wb) = weights(alpha)?;
    let mix = |x: &[f32], y: &[f32]| -> Vec<f32> {
        x.iter()
            .zip(y)
            .map(|(&x, &y)| (wa * x as f64 + wb * y as f64) as f32)
            .collect()
    };
    let values = mix(a.values(), b.values());
    let mut aux = mix(a.aux(), b.aux());
    clamp_variances(a.arch(), &mut aux);
    ParamVector::new(a.arch().clone(), values, aux)
}

/// `τ_t = θ_t − θ_base`, kept in f64 together with the statistics of `θ_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    arch: ArchDescriptor,
    delta: Vec<f64>,
    aux: Vec<f32>,
}

impl TaskVector {
    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    /// Running statistics of the finetuned model.
    pub fn aux(&self) -> &[f32] {
        &self.aux
    }

    pub fn norm(&self) -> f64 {
        self.delta.iter().map(|d| d * d).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.delta.iter().all(|&d| d == 0.0)
    }
}

pub fn task_vector(theta_t: &ParamVector, base: &ParamVector) -> Result<TaskVector> {
    theta_t.ensure_compatible(base)?;
    Ok(TaskVector {
        arch: theta_t.arch().clone(),
        delta: theta_t
            .values()
            .iter()
            .zip(base.values())
            .map(|(&t, &b)| t as f64 - b as f64)
            .collect(),
        aux: theta_t.aux().to_vec(),
    })
}

/// `θ_base + Σᵢ αᵢ·τᵢ`.
///
/// Keeps the base statistics, except for a single vector with coefficient 1,
/// which takes the statistics of its finetuned model.
pub fn task_arithmetic_merge(base: &ParamVector, vectors: &[TaskVector], coeffs: &[f64]) -> Result<ParamVector> {
    if vectors.is_empty() || vectors.len() != coeffs.len() {
        return Err(Error::Config(format!(
            "task arithmetic needs matching non-empty vectors and coefficients, got {} and {}",
            vectors.len(),
            coeffs.len()
        )));
    }
    for v in vectors {
        if v.arch != *base.arch() {
            return Err(Error::Incompatible(base.arch().to_string(), v.arch.to_string()));
        }
    }
    if let Some(c) = coeffs.iter().find(|c| !c.is_finite()) {
        return Err(Error::Config(format!("merge coefficient must be finite, got {c}")));
    }
    let values = base
        .values()
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let shift: f64 = vectors.iter().zip(coeffs).map(|(v, &c)| c * v.delta[i]).sum();
            (b as f64 + shift) as f32
        })
        .collect();
    let aux = match (vectors, coeffs) {
        ([v], [c]) if *c == 1.0 => v.aux.clone(),
        _ => base.aux().to_vec(),
    };
    ParamVector::new(base.arch().clone(), values, aux)
}

/// Replaces running statistics by the average batch statistics of
/// `n_batches` consecutive train-mode batches (wrapping around the data).
/// Trainable values are untouched; networks without normalization are
/// returned as they are.
pub fn recompute_statistics(theta: &ParamVector, data: &Dataset, n_batches: usize, batch_size: usize) -> Result<ParamVector> {
    let layout = theta.arch().layout();
    if layout.aux_count == 0 {
        return Ok(theta.clone());
    }
    if data.is_empty() || n_batches == 0 || batch_size == 0 {
        return Err(Error::Data("statistics recomputation needs data, batches and a batch size".into()));
    }
    if data.sample_shape() != theta.arch().input_shape.as_slice() {
        return Err(Error::Data(format!(
            "data samples {:?} do not fit `{}`",
            data.sample_shape(),
            theta.arch()
        )));
    }
    let values = theta.values_as::<f64>();
    let aux = theta.aux_as::<f64>();
    let mut sum = vec![0.0f64; layout.aux_count];
    let n = data.len();
    for k in 0..n_batches {
        let rows: Vec<usize> = (0..batch_size.min(n)).map(|j| (k * batch_size + j) % n).collect();
        let x = data.inputs().gather_rows(&rows).cast::<f64>();
        let stats = batch_statistics(theta.arch(), &values, &aux, &x, NORM_EPS)?;
        for (i, s) in stats.iter().enumerate() {
            let (off, c) = (layout.aux_offset(i), layout.norm_channels[i]);
            for j in 0..c {
                sum[off + j] += s.mean[j];
                sum[off + c + j] += s.var[j];
            }
        }
    }
    let mut out: Vec<f32> = sum.iter().map(|s| (s / n_batches as f64) as f32).collect();
    clamp_variances(theta.arch(), &mut out);
    theta.with_aux(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;

    fn pair() -> (ParamVector, ParamVector) {
        // One hidden width-1 layer without bias collapses to a 2-value vector we can pin.
        let arch = ArchDescriptor::mlp(&[1, 1]).unwrap();
        let a = ParamVector::new(arch.clone(), vec![1.0, -2.0], vec![]).unwrap();
        let b = ParamVector::new(arch, vec![5.0, 4.0], vec![]).unwrap();
        (a, b)
    }

    #[test]
    fn interpolation_examples() {
        let (a, b) = pair();
        assert_eq!(linear_interpolate(&a, &b, 0.0).unwrap().values(), &[1.0, -2.0]);
        assert_eq!(linear_interpolate(&a, &b, 1.0).unwrap().values(), &[5.0, 4.0]);
        assert_eq!(linear_interpolate(&a, &b, 0.5).unwrap().values(), &[3.0, 1.0]);
    }

    #[test]
    fn task_vector_examples() {
        let arch = ArchDescriptor::mlp(&[1, 1]).unwrap();
        let t = ParamVector::new(arch.clone(), vec![3.0, 1.0], vec![]).unwrap();
        let base = ParamVector::new(arch.clone(), vec![1.0, 1.0], vec![]).unwrap();
        assert_eq!(task_vector(&t, &base).unwrap().delta(), &[2.0, 0.0]);
        assert!(task_vector(&t, &t).unwrap().is_zero());

        let zero = ParamVector::new(arch.clone(), vec![0.0, 0.0], vec![]).unwrap();
        let t1 = ParamVector::new(arch.clone(), vec![1.0, 2.0], vec![]).unwrap();
        let t2 = ParamVector::new(arch, vec![3.0, -1.0], vec![]).unwrap();
        let v = [task_vector(&t1, &zero).unwrap(), task_vector(&t2, &zero).unwrap()];
        assert_eq!(task_arithmetic_merge(&zero, &v, &[0.5, 0.5]).unwrap().values(), &[2.0, 0.5]);
        assert_eq!(task_arithmetic_merge(&zero, &v, &[0.0, 0.0]).unwrap(), zero);
    }

    #[test]
    fn single_vector_reproduces_finetuned_model() {
        let arch = ArchDescriptor::mlp_norm(&[4, 6, 3]).unwrap();
        let base = ParamVector::build(&arch, 1).unwrap();
        let tuned = ParamVector::build(&arch, 2).unwrap();
        let mut aux = tuned.aux().to_vec();
        aux[0] = 0.25;
        let tuned = tuned.with_aux(aux).unwrap();
        let tv = task_vector(&tuned, &base).unwrap();
        assert_eq!(task_arithmetic_merge(&base, std::slice::from_ref(&tv), &[1.0]).unwrap(), tuned);
        let half = task_arithmetic_merge(&base, &[tv], &[0.5]).unwrap();
        assert_eq!(half.aux(), base.aux());
    }

    #[test]
    fn incompatible_models_rejected() {
        let a = ParamVector::build(&ArchDescriptor::mlp(&[2, 3]).unwrap(), 0).unwrap();
        let b = ParamVector::build(&ArchDescriptor::mlp(&[2, 4]).unwrap(), 0).unwrap();
        assert!(linear_interpolate(&a, &b, 0.5).is_err());
        assert!(task_vector(&a, &b).is_err());
        let tv = task_vector(&b, &b).unwrap();
        assert!(task_arithmetic_merge(&a, &[tv], &[1.0]).is_err());
        assert!(MergeSpec::linear(0.5).apply(None, &[&a], None).is_err());
    }

    #[test]
    fn interpolated_variances_are_clamped() {
        let arch = ArchDescriptor::mlp_norm(&[2, 2, 2]).unwrap();
        let p = ParamVector::build(&arch, 0).unwrap();
        let mut aux = p.aux().to_vec();
        aux[2] = 1e-30;
        let q = p.with_aux(aux).unwrap();
        let m = linear_interpolate(&q, &q, 0.5).unwrap();
        assert_eq!(m.aux()[2], MIN_VARIANCE);
    }

    #[test]
    fn recompute_leaves_plain_networks_alone() {
        let arch = ArchDescriptor::mlp(&[4, 5, 3]).unwrap();
        let p = ParamVector::build(&arch, 0).unwrap();
        let d = make_synthetic(0, 20, 0, 3, 4, 0).unwrap().train;
        assert_eq!(recompute_statistics(&p, &d, 3, 8).unwrap(), p);
    }

    #[test]
    fn recompute_is_deterministic_and_touches_only_statistics() {
        let arch = ArchDescriptor::mlp_norm(&[4, 5, 3]).unwrap();
        let p = ParamVector::build(&arch, 0).unwrap();
        let d = make_synthetic(0, 20, 0, 3, 4, 0).unwrap().train;
        let r1 = recompute_statistics(&p, &d, 3, 8).unwrap();
        let r2 = recompute_statistics(&r1, &d, 3, 8).unwrap();
        assert_eq!(r1.values(), p.values());
        assert_ne!(r1.aux(), p.aux());
        assert_eq!(r1, r2);
    }

    #[test]
    fn spec_apply_recomputes_when_asked() {
        let arch = ArchDescriptor::mlp_norm(&[4, 5, 3]).unwrap();
        let (a, b) = (ParamVector::build(&arch, 0).unwrap(), ParamVector::build(&arch, 1).unwrap());
        let d = make_synthetic(0, 20, 0, 3, 4, 0).unwrap().train;
        let policy = StatsPolicy::Recompute { n_batches: 2, batch_size: 10 };
        let spec = MergeSpec::linear(0.5).with_stats(policy);
        assert!(spec.apply(None, &[&a, &b], None).is_err());
        let m = spec.apply(None, &[&a, &b], Some(&d)).unwrap();
        let plain = linear_interpolate(&a, &b, 0.5).unwrap();
        assert_eq!(m.values(), plain.values());
        assert_eq!(m, recompute_statistics(&plain, &d, 2, 10).unwrap());
    }
}
