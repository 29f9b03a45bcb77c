use std::sync::atomic::{AtomicU64, Ordering};

use super::{Result, Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of a batch seen by a train-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (biased when only one element per channel).
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for y in 0..self.ho {
                        let iy = (y * self.stride + ki) as isize - self.pad as isize;
                        for xo in 0..self.wo {
                            let ix = (xo * self.stride + kj) as isize - self.pad as isize;
                            dst[y * self.wo + xo] = if iy < 0
                                || ix < 0
                                || iy >= self.h as isize
                                || ix >= self.w as isize
                            {
                                T::zero()
                            } else {
                                x[(ci * self.h + iy as usize) * self.w + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for y in 0..self.ho {
                        let iy = (y * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for xo in 0..self.wo {
                            let ix = (xo * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            dx[(ci * self.h + iy as usize) * self.w + ix as usize] +=
                                src[y * self.wo + xo];
                        }
                    }
                }
            }
        }
    }
}

/// Channel layout of a normalized tensor: `[N, C]` or `[N, C, H, W]`.
#[derive(Clone, Copy, Debug)]
struct NormLayout {
    n: usize,
    c: usize,
    spatial: usize,
}

impl NormLayout {
    fn of(shape: &[usize]) -> Option<Self> {
        match shape {
            [n, c] => Some(Self {
                n: *n,
                c: *c,
                spatial: 1,
            }),
            [n, c, h, w] => Some(Self {
                n: *n,
                c: *c,
                spatial: h * w,
            }),
            _ => None,
        }
    }

    fn count(&self) -> usize {
        self.n * self.spatial
    }

    /// Calls `f(channel, flat_index)` over every element.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for n in 0..self.n {
            for c in 0..self.c {
                let base = (n * self.c + c) * self.spatial;
                for s in 0..self.spatial {
                    f(c, base + s);
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        weight: usize,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    Relu(usize),
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        layout: NormLayout,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    SoftmaxCe {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations; recording order is topological.
///
/// A tape is confined to one thread. Build a fresh one for every forward pass.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// A tape that rejects non-finite operands at every primitive.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.check_finite("leaf", &value)?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.check_finite("constant", &value)?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.resolve(v).expect("foreign variable")].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.resolve(v)?].value)
    }

    fn resolve(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check_finite(&self, op: &'static str, t: &Tensor<T>) -> Result<()> {
        if self.checked && !t.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }

    fn operand(&self, op: &'static str, v: Var) -> Result<usize> {
        let i = self.resolve(v)?;
        self.check_finite(op, &self.nodes[i].value)?;
        Ok(i)
    }

    fn needs(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.operand(name, a)?, self.operand(name, b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(out, op(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.operand("scale", a)?;
        let t = &self.nodes[ia].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * c).collect())?;
        let rg = self.needs(&[ia]);
        Ok(self.push(out, Op::Scale(ia, c), rg))
    }

    /// `x[.., j] + b[j]`: adds a vector along the trailing axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.operand("add_bias", x)?, self.operand("add_bias", b)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let width = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [width] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(width.max(1)) {
            for (v, &bj) in row.iter_mut().zip(tb.data()) {
                *v += bj;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(&[ix, ib]);
        Ok(self.push(out, Op::AddBias(ix, ib), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.operand("matmul", a)?, self.operand("matmul", b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: ta.shape().to_vec(),
                    right: tb.shape().to_vec(),
                })
            }
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), ta.data(), k, 1, tb.data(), n, 1, T::zero(), &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    /// 2D cross-correlation of `[N, C, H, W]` with `[O, C, KH, KW]`, zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.operand("conv2d", x)?, self.operand("conv2d", weight)?);
        let (tx, tw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            left: tx.shape().to_vec(),
            right: tw.shape().to_vec(),
        };
        let ([n, c, h, w], [o, c2, kh, kw]) = (tx.shape(), tw.shape()) else {
            return Err(mismatch());
        };
        if c != c2 || stride == 0 || h + 2 * pad < *kh || w + 2 * pad < *kw {
            return Err(mismatch());
        }
        let geom = ConvGeom {
            n: *n,
            c: *c,
            h: *h,
            w: *w,
            o: *o,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (patch, p) = (geom.patch(), geom.positions());
        let mut cols = vec![T::zero(); patch * p];
        let mut out = vec![T::zero(); geom.n * geom.o * p];
        let in_len = geom.c * geom.h * geom.w;
        for s in 0..geom.n {
            geom.im2col(&tx.data()[s * in_len..(s + 1) * in_len], &mut cols);
            T::gemm(
                geom.o,
                patch,
                p,
                T::one(),
                tw.data(),
                patch,
                1,
                &cols,
                p,
                1,
                T::zero(),
                &mut out[s * geom.o * p..(s + 1) * geom.o * p],
            );
        }
        let out = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out)?;
        let rg = self.needs(&[ix, iw]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input: ix,
                weight: iw,
                geom,
            },
            rg,
        ))
    }

    /// Max pooling over `[N, C, H, W]` with a square window.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let ix = self.operand("max_pool2d", x)?;
        let tx = &self.nodes[ix].value;
        let [n, c, h, w] = *tx.shape() else {
            return Err(TensorError::Invalid(format!(
                "max_pool2d expects a 4D input, got {:?}",
                tx.shape()
            )));
        };
        if kernel == 0 || stride == 0 || h < kernel || w < kernel {
            return Err(TensorError::Invalid(format!(
                "max_pool2d window {kernel} does not fit {:?}",
                tx.shape()
            )));
        }
        let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let data = tx.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = base + y * stride * w + xo * stride;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let idx = base + (y * stride + ki) * w + xo * stride + kj;
                            if data[idx].primal() > data[best].primal() {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.needs(&[ix]);
        Ok(self.push(out, Op::MaxPool2d { input: ix, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.operand("relu", x)?;
        let tx = &self.nodes[ix].value;
        let data = tx
            .data()
            .iter()
            .map(|&v| if v.primal() > 0.0 { v } else { T::zero() })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(&[ix]);
        Ok(self.push(out, Op::Relu(ix), rg))
    }

    /// Batch normalization over `[N, C]` (per feature) or `[N, C, H, W]` (per channel).
    ///
    /// In train mode the batch statistics are returned so the caller can
    /// update its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<NormStats<T>>)> {
        let ix = self.operand("batch_norm", x)?;
        let ig = self.operand("batch_norm", gamma)?;
        let ib = self.operand("batch_norm", beta)?;
        let tx = &self.nodes[ix].value;
        let layout = NormLayout::of(tx.shape()).ok_or_else(|| {
            TensorError::Invalid(format!("batch_norm expects 2D or 4D input, got {:?}", tx.shape()))
        })?;
        let (tg, tb) = (&self.nodes[ig].value, &self.nodes[ib].value);
        for t in [tg, tb] {
            if t.shape() != [layout.c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    left: tx.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        if layout.count() == 0 {
            return Err(TensorError::Invalid("batch_norm on an empty batch".into()));
        }
        let data = tx.data();
        let eps_t = T::from_f64(eps);
        let (mean, var_biased, stats, train) = match mode {
            NormMode::Train => {
                let m = T::from_f64(layout.count() as f64);
                let mut mean = vec![T::zero(); layout.c];
                layout.for_each(|c, i| mean[c] += data[i]);
                mean.iter_mut().for_each(|v| *v = *v / m);
                let mut ss = vec![T::zero(); layout.c];
                layout.for_each(|c, i| {
                    let d = data[i] - mean[c];
                    ss[c] += d * d;
                });
                let biased: Vec<T> = ss.iter().map(|&s| s / m).collect();
                let denom = T::from_f64(layout.count().saturating_sub(1).max(1) as f64);
                let unbiased = if layout.count() > 1 {
                    ss.iter().map(|&s| s / denom).collect()
                } else {
                    biased.clone()
                };
                let stats = NormStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, biased, Some(stats), true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != layout.c || var.len() != layout.c {
                    return Err(TensorError::ShapeMismatch {
                        op: "batch_norm",
                        left: tx.shape().to_vec(),
                        right: vec![mean.len(), var.len()],
                    });
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        let (g, b) = (tg.data(), tb.data());
        layout.for_each(|c, i| {
            let xh = (data[i] - mean[c]) * inv_std[c];
            xhat[i] = xh;
            out[i] = g[c] * xh + b[c];
        });
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.needs(&[ix, ig, ib]);
        let v = self.push(
            out,
            Op::BatchNorm {
                input: ix,
                gamma: ig,
                beta: ib,
                layout,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.operand("softmax_cross_entropy", logits)?;
        let tl = &self.nodes[il].value;
        let [n, k] = *tl.shape() else {
            return Err(TensorError::Invalid(format!(
                "softmax_cross_entropy expects [N, K] logits, got {:?}",
                tl.shape()
            )));
        };
        if labels.len() != n || n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &tl.data()[r * k..(r + 1) * k];
            let max = row
                .iter()
                .copied()
                .fold(row[0], |a, b| if b.primal() > a.primal() { b } else { a });
            let mut z = T::zero();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p = *p / z;
            }
            total += z.ln() + max - row[label];
        }
        let loss = Tensor::scalar(total / T::from_f64(n as f64));
        let rg = self.needs(&[il]);
        Ok(self.push(
            loss,
            Op::SoftmaxCe {
                logits: il,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.operand("sum", x)?;
        let s = self.nodes[ix].value.data().iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.needs(&[ix]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.operand("mean", x)?;
        let t = &self.nodes[ix].value;
        if t.is_empty() {
            return Err(TensorError::Invalid("mean of an empty tensor".into()));
        }
        let s = t.data().iter().fold(T::zero(), |a, &b| a + b) / T::from_f64(t.len() as f64);
        let rg = self.needs(&[ix]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(ix), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.operand("reshape", x)?;
        let out = self.nodes[ix].value.clone().reshape(shape)?;
        let rg = self.needs(&[ix]);
        Ok(self.push(out, Op::Reshape(ix), rg))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.try_value(x)?.shape().to_vec();
        let n = *shape.first().ok_or_else(|| TensorError::Invalid("flatten of a 0-d tensor".into()))?;
        self.reshape(x, &[n, shape[1..].iter().product()])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.resolve(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[root].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[i].requires_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| vec![T::zero(); self.nodes[i].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, &g), &y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *c)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                let width = self.nodes[*b].value.len();
                acc(*b, &mut |s| {
                    for row in g.chunks(width.max(1)) {
                        s.iter_mut().zip(row).for_each(|(s, &g)| *s += g);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                // dA = G B^T, dB = A^T G
                acc(*a, &mut |s| T::gemm(m, n, k, T::one(), g, n, 1, vb, 1, n, T::one(), s));
                acc(*b, &mut |s| T::gemm(k, m, n, T::one(), va, 1, k, g, n, 1, T::one(), s));
            }
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let (patch, p) = (geom.patch(), geom.positions());
                let in_len = geom.c * geom.h * geom.w;
                let out_len = geom.o * p;
                let (vx, vw) = (val(*input), val(*weight));
                let mut cols = vec![T::zero(); patch * p];
                if self.nodes[*weight].requires_grad {
                    acc(*weight, &mut |s| {
                        for n in 0..geom.n {
                            geom.im2col(&vx[n * in_len..(n + 1) * in_len], &mut cols);
                            let go = &g[n * out_len..(n + 1) * out_len];
                            T::gemm(geom.o, p, patch, T::one(), go, p, 1, &cols, 1, p, T::one(), s);
                        }
                    });
                }
                acc(*input, &mut |s| {
                    let mut dcols = vec![T::zero(); patch * p];
                    for n in 0..geom.n {
                        let go = &g[n * out_len..(n + 1) * out_len];
                        T::gemm(patch, geom.o, p, T::one(), vw, 1, patch, go, p, 1, T::zero(), &mut dcols);
                        geom.col2im(&dcols, &mut s[n * in_len..(n + 1) * in_len]);
                    }
                });
            }
            Op::MaxPool2d { input, argmax } => acc(*input, &mut |s| {
                for (&idx, &g) in argmax.iter().zip(g) {
                    s[idx] += g;
                }
            }),
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(vx) {
                        if x.primal() > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            } => {
                let mut sum_g = vec![T::zero(); layout.c];
                let mut sum_gx = vec![T::zero(); layout.c];
                layout.for_each(|c, i| {
                    sum_g[c] += g[i];
                    sum_gx[c] += g[i] * xhat[i];
                });
                acc(*gamma, &mut |s| s.iter_mut().zip(&sum_gx).for_each(|(s, &v)| *s += v));
                acc(*beta, &mut |s| s.iter_mut().zip(&sum_g).for_each(|(s, &v)| *s += v));
                let vg = val(*gamma);
                acc(*input, &mut |s| {
                    if *train {
                        let m = T::from_f64(layout.count() as f64);
                        layout.for_each(|c, i| {
                            let k = vg[c] * inv_std[c] / m;
                            s[i] += k * (m * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                        });
                    } else {
                        layout.for_each(|c, i| s[i] += g[i] * vg[c] * inv_std[c]);
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / T::from_f64(n as f64);
                acc(*logits, &mut |s| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            s[r * k + j] += (probs[r * k + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = T::from_f64(self.nodes[*x].value.len() as f64);
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g)),
        }
    }
}

/// Result of [`Tape::backward`]; unreached nodes read as zeros.
pub struct Gradients<T> {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Result<Tensor<T>> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(TensorError::ForeignVar);
        }
        let shape = self.shapes[v.index].clone();
        match &self.grads[v.index] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros(&shape)),
        }
    }

    /// Appends the gradient of `v` to `out` without building a tensor.
    pub fn extend_into(&self, v: Var, out: &mut Vec<T>) -> Result<()> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(TensorError::ForeignVar);
        }
        match &self.grads[v.index] {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat_n(T::zero(), self.shapes[v.index].iter().product())),
        }
        Ok(())
    }
}
