use crate::error::{Error, Result};
use crate::tensor::{NormMode, NormStats, Scalar, Tape, Tensor, TensorError, Var};

use super::arch::{ArchDescriptor, ArchKind, Layout};

/// Batch normalization epsilon used for training and evaluation.
pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics momentum for train-mode forwards.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub eps: f64,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            eps: NORM_EPS,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            eps: NORM_EPS,
        }
    }
}

/// Records the network on `tape`. `params` holds one variable per layout segment.
///
/// Returns the logits and, in train mode, the batch statistics of every
/// normalization layer.
pub(crate) fn record<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &ArchDescriptor,
    layout: &Layout,
    params: &[Var],
    aux: &[T],
    x: Var,
    opts: ForwardOptions,
) -> Result<(Var, Vec<NormStats<T>>)> {
    let mut stats = Vec::new();
    let mut norm_index = 0;
    let mut normalize = |tape: &mut Tape<T>, h: Var, scale: Var, shift: Var| -> Result<Var> {
        let c = layout.norm_channels[norm_index];
        let off = layout.aux_offset(norm_index);
        norm_index += 1;
        let mode = match opts.mode {
            Mode::Train => NormMode::Train,
            Mode::Eval => NormMode::Eval {
                mean: &aux[off..off + c],
                var: &aux[off + c..off + 2 * c],
            },
        };
        let (y, s) = tape.batch_norm(h, scale, shift, mode, opts.eps)?;
        stats.extend(s);
        Ok(y)
    };

    let shape = tape.try_value(x)?.shape().to_vec();
    let want: Vec<usize> = arch.input_shape.clone();
    if shape.len() != want.len() + 1 || shape[1..] != want[..] {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            left: shape,
            right: want,
        }
        .into());
    }

    let mut p = params.iter().copied();
    let mut next = || p.next().ok_or_else(|| Error::Arch("parameter list too short".into()));
    let mut h = x;
    match arch.kind {
        ArchKind::Mlp | ArchKind::MlpNorm => {
            for _ in &arch.hidden {
                h = tape.matmul(h, next()?)?;
                h = if arch.kind == ArchKind::MlpNorm {
                    let (scale, shift) = (next()?, next()?);
                    normalize(tape, h, scale, shift)?
                } else {
                    tape.add_bias(h, next()?)?
                };
                h = tape.relu(h)?;
            }
        }
        ArchKind::TinyCnn => {
            for _ in &arch.hidden {
                h = tape.conv2d(h, next()?, 1, 1)?;
                let (scale, shift) = (next()?, next()?);
                h = normalize(tape, h, scale, shift)?;
                h = tape.relu(h)?;
                h = tape.max_pool2d(h, 2, 2)?;
            }
            h = tape.flatten(h)?;
        }
    }
    h = tape.matmul(h, next()?)?;
    h = tape.add_bias(h, next()?)?;
    Ok((h, stats))
}

/// Places every segment of `values` on the tape as a differentiable leaf.
pub(crate) fn param_leaves<T: Scalar>(tape: &mut Tape<T>, layout: &Layout, values: &[T], trainable: bool) -> Result<Vec<Var>> {
    if values.len() != layout.param_count {
        return Err(TensorError::DimensionMismatch {
            expected: layout.param_count,
            got: values.len(),
        }
        .into());
    }
    layout
        .segments
        .iter()
        .map(|s| {
            let t = Tensor::new(s.shape.clone(), values[s.range()].to_vec())?;
            Ok(if trainable { tape.leaf(t)? } else { tape.constant(t)? })
        })
        .collect()
}

/// Running statistics after folding in one train-mode batch.
pub(crate) fn updated_aux<T: Scalar>(layout: &Layout, aux: &[T], stats: &[NormStats<T>]) -> Vec<T> {
    let mut out = aux.to_vec();
    let keep = T::from_f64(1.0 - NORM_MOMENTUM);
    let take = T::from_f64(NORM_MOMENTUM);
    for (i, s) in stats.iter().enumerate() {
        let c = layout.norm_channels[i];
        let off = layout.aux_offset(i);
        for j in 0..c {
            out[off + j] = keep * out[off + j] + take * s.mean[j];
            out[off + c + j] = keep * out[off + c + j] + take * s.var[j];
        }
    }
    out
}

/// Loss, gradient and bookkeeping of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad: Vec<T>,
    /// Running statistics after this pass (unchanged in eval mode).
    pub aux: Vec<T>,
    pub correct: usize,
}

/// Mean cross-entropy of a batch and its gradient with respect to all trainable values.
pub fn loss_and_grad<T: Scalar>(
    arch: &ArchDescriptor,
    values: &[T],
    aux: &[T],
    inputs: &Tensor<T>,
    labels: &[usize],
    opts: ForwardOptions,
) -> Result<LossGrad<T>> {
    let layout = arch.layout();
    let mut tape = Tape::new();
    let params = param_leaves(&mut tape, &layout, values, true)?;
    let x = tape.constant(inputs.clone())?;
    let (logits, stats) = record(&mut tape, arch, &layout, &params, aux, x, opts)?;
    let correct = count_correct(tape.value(logits), labels);
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;
    let mut grad = Vec::with_capacity(layout.param_count);
    for &p in &params {
        grads.extend_into(p, &mut grad)?;
    }
    let aux = match opts.mode {
        Mode::Train => updated_aux(&layout, aux, &stats),
        Mode::Eval => aux.to_vec(),
    };
    Ok(LossGrad {
        loss: tape.value(loss).data()[0],
        grad,
        aux,
        correct,
    })
}

/// Logits of a batch; in train mode also the updated running statistics.
pub fn logits<T: Scalar>(
    arch: &ArchDescriptor,
    values: &[T],
    aux: &[T],
    inputs: &Tensor<T>,
    opts: ForwardOptions,
) -> Result<(Tensor<T>, Vec<T>)> {
    let layout = arch.layout();
    let mut tape = Tape::new();
    let params = param_leaves(&mut tape, &layout, values, false)?;
    let x = tape.constant(inputs.clone())?;
    let (out, stats) = record(&mut tape, arch, &layout, &params, aux, x, opts)?;
    let aux = match opts.mode {
        Mode::Train => updated_aux(&layout, aux, &stats),
        Mode::Eval => aux.to_vec(),
    };
    Ok((tape.value(out).clone(), aux))
}

/// Batch statistics (mean, unbiased variance) of every normalization layer.
pub(crate) fn batch_statistics<T: Scalar>(
    arch: &ArchDescriptor,
    values: &[T],
    aux: &[T],
    inputs: &Tensor<T>,
    eps: f64,
) -> Result<Vec<NormStats<T>>> {
    let layout = arch.layout();
    let mut tape = Tape::new();
    let params = param_leaves(&mut tape, &layout, values, false)?;
    let x = tape.constant(inputs.clone())?;
    let opts = ForwardOptions { mode: Mode::Train, eps };
    let (_, stats) = record(&mut tape, arch, &layout, &params, aux, x, opts)?;
    Ok(stats)
}

pub(crate) fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if v.primal() > row[best].primal() {
            best = j;
        }
    }
    best
}
