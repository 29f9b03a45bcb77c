//! Network definitions and the flat parameter vector used by merge algebra.

mod arch;
mod model;

pub use arch::{ArchDescriptor, ArchKind, Layout, Role, Segment};
pub use model::{loss_and_grad, logits, ForwardOptions, LossGrad, Mode, NORM_EPS, NORM_MOMENTUM};
pub(crate) use model::{batch_statistics, count_correct};

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::RngStream;
use crate::tensor::{Objective, Scalar, Tensor, TensorError};

/// Variance floor for running statistics.
pub const MIN_VARIANCE: f32 = 1e-12;

/// Trainable values in canonical layer order plus normalization running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    arch: ArchDescriptor,
    values: Vec<f32>,
    aux: Vec<f32>,
}

impl ParamVector {
    pub fn new(arch: ArchDescriptor, values: Vec<f32>, aux: Vec<f32>) -> Result<Self> {
        let layout = arch.layout();
        if values.len() != layout.param_count {
            return Err(Error::Arch(format!(
                "`{arch}` has {} values, got {}",
                layout.param_count,
                values.len()
            )));
        }
        if aux.len() != layout.aux_count {
            return Err(Error::Arch(format!(
                "`{arch}` has {} statistics, got {}",
                layout.aux_count,
                aux.len()
            )));
        }
        for i in 0..layout.norm_channels.len() {
            let (off, c) = (layout.aux_offset(i), layout.norm_channels[i]);
            if aux[off + c..off + 2 * c].iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Arch("running variances must be strictly positive".into()));
            }
        }
        Ok(Self { arch, values, aux })
    }

    /// Kaiming-uniform weights (relu gain), zero biases and shifts, unit scales.
    pub fn build(arch: &ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut rng = RngStream::derive(seed, "init", 0);
        let mut values = vec![0.0f32; layout.param_count];
        for seg in &layout.segments {
            let dst = &mut values[seg.range()];
            match seg.role {
                Role::Weight { .. } => {
                    let bound = (6.0 / seg.fan_in as f64).sqrt() as f32;
                    dst.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                Role::NormScale => dst.fill(1.0),
                Role::Bias | Role::NormShift => {}
            }
        }
        let aux = default_aux(&layout);
        Ok(Self {
            arch: arch.clone(),
            values,
            aux,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn aux(&self) -> &[f32] {
        &self.aux
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_parts(self) -> (ArchDescriptor, Vec<f32>, Vec<f32>) {
        (self.arch, self.values, self.aux)
    }

    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        Self::new(self.arch.clone(), values, self.aux.clone())
    }

    pub fn with_aux(&self, aux: Vec<f32>) -> Result<Self> {
        Self::new(self.arch.clone(), self.values.clone(), aux)
    }

    pub fn values_as<T: Scalar>(&self) -> Vec<T> {
        self.values.iter().map(|&v| T::from_f32(v)).collect()
    }

    pub fn aux_as<T: Scalar>(&self) -> Vec<T> {
        self.aux.iter().map(|&v| T::from_f32(v)).collect()
    }

    /// Two vectors can be merged iff their architectures are identical.
    pub fn compatible(&self, other: &ParamVector) -> bool {
        self.arch == other.arch
    }

    pub fn ensure_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.compatible(other) {
            Ok(())
        } else {
            Err(Error::Incompatible(self.arch.to_string(), other.arch.to_string()))
        }
    }

    /// Per-segment tensors in canonical order.
    pub fn unpack(&self) -> Vec<(String, Tensor<f32>)> {
        self.arch
            .layout()
            .segments
            .into_iter()
            .map(|s| {
                let t = Tensor::new(s.shape.clone(), self.values[s.range()].to_vec()).expect("layout shape");
                (s.name, t)
            })
            .collect()
    }

    /// Inverse of [`unpack`](Self::unpack); statistics are reset to defaults.
    pub fn pack(arch: &ArchDescriptor, tensors: &[Tensor<f32>]) -> Result<Self> {
        let layout = arch.layout();
        if tensors.len() != layout.segments.len() {
            return Err(Error::Arch(format!(
                "expected {} tensors, got {}",
                layout.segments.len(),
                tensors.len()
            )));
        }
        let mut values = Vec::with_capacity(layout.param_count);
        for (seg, t) in layout.segments.iter().zip(tensors) {
            if t.shape() != seg.shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "pack",
                    left: seg.shape.clone(),
                    right: t.shape().to_vec(),
                }
                .into());
            }
            values.extend_from_slice(t.data());
        }
        let aux = default_aux(&layout);
        Self::new(arch.clone(), values, aux)
    }
}

pub(crate) fn default_aux(layout: &Layout) -> Vec<f32> {
    let mut aux = Vec::with_capacity(layout.aux_count);
    for &c in &layout.norm_channels {
        aux.extend(std::iter::repeat_n(0.0f32, c));
        aux.extend(std::iter::repeat_n(1.0f32, c));
    }
    aux
}

/// Output of [`forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Tensor<f32>,
    /// Statistics after a train-mode pass; `None` in eval mode.
    pub updated_aux: Option<Vec<f32>>,
}

/// 32-bit forward pass of a batch `[N, input_shape...]`.
pub fn forward(params: &ParamVector, batch: &Tensor<f32>, mode: Mode) -> Result<Forward> {
    let opts = ForwardOptions { mode, eps: NORM_EPS };
    let (out, aux) = logits(&params.arch, &params.values, &params.aux, batch, opts)?;
    Ok(Forward {
        logits: out,
        updated_aux: (mode == Mode::Train).then_some(aux),
    })
}

/// Batch-norm epsilon used by the scale-invariance probe.
pub const INVARIANCE_EPS: f64 = 1e-12;

/// Largest absolute logit change when every hidden (pre-normalization)
/// weight tensor is multiplied by `scale`.
///
/// Runs in 64-bit eval mode with running statistics recomputed over
/// `probe_batch` for both networks. The head is never scaled.
pub fn check_scale_invariance(params: &ParamVector, scale: f64, probe_batch: &Tensor<f32>) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("scale must be positive, got {scale}")));
    }
    let layout = params.arch.layout();
    let base = params.values_as::<f64>();
    let mut scaled = base.clone();
    for seg in &layout.segments {
        if matches!(seg.role, Role::Weight { .. }) && !seg.name.starts_with("head") {
            scaled[seg.range()].iter_mut().for_each(|v| *v *= scale);
        }
    }
    let x = probe_batch.cast::<f64>();
    let eval = |values: &[f64]| -> Result<Vec<f64>> {
        let stats = batch_statistics(&params.arch, values, &params.aux_as::<f64>(), &x, INVARIANCE_EPS)?;
        let mut aux = Vec::with_capacity(layout.aux_count);
        for s in stats {
            aux.extend(s.mean);
            aux.extend(s.var);
        }
        let opts = ForwardOptions {
            mode: Mode::Eval,
            eps: INVARIANCE_EPS,
        };
        Ok(logits(&params.arch, values, &aux, &x, opts)?.0.into_data())
    };
    let (a, b) = (eval(&base)?, eval(&scaled)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// Numeric width of evaluation and training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Mean loss and accuracy over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Rows per evaluation chunk. Chunk results are combined in order, so the
/// result does not depend on how chunks are scheduled.
pub const EVAL_CHUNK: usize = 512;

/// Eval-mode loss and accuracy of `params` on `data`.
pub fn evaluate(params: &ParamVector, data: &Dataset, precision: Precision) -> Result<EvalMetrics> {
    match precision {
        Precision::F32 => evaluate_as::<f32>(params, data),
        Precision::F64 => evaluate_as::<f64>(params, data),
    }
}

fn evaluate_as<T: Scalar>(params: &ParamVector, data: &Dataset) -> Result<EvalMetrics> {
    let n = data.len();
    if n == 0 {
        return Ok(EvalMetrics::default());
    }
    let values = params.values_as::<T>();
    let aux = params.aux_as::<T>();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts = parallel::par_map(&starts, |&start| -> Result<(f64, usize)> {
        let end = (start + EVAL_CHUNK).min(n);
        let x = data.inputs().slice_rows(start, end).cast::<T>();
        let labels = &data.labels()[start..end];
        let (out, _) = logits(&params.arch, &values, &aux, &x, ForwardOptions::eval())?;
        let loss = cross_entropy_sum(&out, labels);
        Ok((loss, count_correct(&out, labels)))
    });
    let (mut loss, mut correct) = (0.0, 0);
    for part in parts {
        let (l, c) = part?;
        loss += l;
        correct += c;
    }
    Ok(EvalMetrics {
        loss: loss / n as f64,
        accuracy: correct as f64 / n as f64,
        count: n,
    })
}

fn cross_entropy_sum<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &label)| {
            let max = row.iter().map(|v| v.primal()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.primal() - max).exp()).sum();
            z.ln() + max - row[label].primal()
        })
        .sum()
}

/// Eval-mode mean loss over a fixed sample set as a function of the trainable values.
///
/// Running statistics are held fixed, which makes the loss a deterministic
/// function suitable for Hessian probes.
pub struct NetworkObjective {
    arch: ArchDescriptor,
    aux: Vec<f64>,
    inputs: Tensor<f64>,
    labels: Vec<usize>,
}

impl NetworkObjective {
    pub fn new(params: &ParamVector, inputs: &Tensor<f32>, labels: &[usize]) -> Result<Self> {
        if inputs.shape().first() != Some(&labels.len()) || labels.is_empty() {
            return Err(Error::Data("probe inputs and labels disagree".into()));
        }
        Ok(Self {
            arch: params.arch.clone(),
            aux: params.aux_as(),
            inputs: inputs.cast(),
            labels: labels.to_vec(),
        })
    }
}

impl Objective for NetworkObjective {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn value_and_grad<T: Scalar>(&self, params: &[T]) -> crate::tensor::Result<(T, Vec<T>)> {
        let aux: Vec<T> = self.aux.iter().map(|&v| T::from_f64(v)).collect();
        let x: Tensor<T> = self.inputs.cast();
        let out = loss_and_grad(&self.arch, params, &aux, &x, &self.labels, ForwardOptions::eval())
            .map_err(|e| match e {
                Error::Tensor(t) => t,
                other => TensorError::Invalid(other.to_string()),
            })?;
        Ok((out.loss, out.grad))
    }
}
