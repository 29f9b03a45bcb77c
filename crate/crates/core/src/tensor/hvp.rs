use super::{Dual64, Result, Scalar, TensorError};

/// A scalar loss over a flat parameter vector, differentiable at any scalar width.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    /// Loss and gradient at `params`.
    fn value_and_grad<T: Scalar>(&self, params: &[T]) -> Result<(T, Vec<T>)>;
}

/// How `H·v` is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HvpMode {
    /// `(∇L(θ + h·v) − ∇L(θ − h·v)) / 2h` in 64-bit.
    #[default]
    CentralDifference,
    /// Reverse sweep over dual numbers seeded with tangent `v`; exact up to rounding.
    ForwardOverReverse,
}

/// Hessian-vector product of `objective` at `params` along `v`.
pub fn hessian_vector_product<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    v: &[f64],
    mode: HvpMode,
) -> Result<Vec<f64>> {
    if params.len() != objective.dim() {
        return Err(TensorError::DimensionMismatch {
            expected: objective.dim(),
            got: params.len(),
        });
    }
    if v.len() != params.len() {
        return Err(TensorError::DimensionMismatch {
            expected: params.len(),
            got: v.len(),
        });
    }
    match mode {
        HvpMode::CentralDifference => {
            let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let h = 1e-3 * (1.0 + norm(params)) / (1.0 + norm(v));
            let shifted = |sign: f64| -> Vec<f64> {
                params.iter().zip(v).map(|(p, d)| p + sign * h * d).collect()
            };
            let (_, plus) = objective.value_and_grad::<f64>(&shifted(1.0))?;
            let (_, minus) = objective.value_and_grad::<f64>(&shifted(-1.0))?;
            Ok(plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect())
        }
        HvpMode::ForwardOverReverse => {
            let seeded: Vec<Dual64> = params.iter().zip(v).map(|(&p, &d)| Dual64::new(p, d)).collect();
            let (_, grad) = objective.value_and_grad(&seeded)?;
            Ok(grad.into_iter().map(|g| g.eps).collect())
        }
    }
}

/// `½ θᵀAθ` for a dense symmetric `A` stored row-major.
#[derive(Clone, Debug)]
pub struct Quadratic {
    dim: usize,
    matrix: Vec<f64>,
}

impl Quadratic {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(TensorError::DimensionMismatch {
                expected: dim * dim,
                got: matrix.len(),
            });
        }
        Ok(Self { dim, matrix })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut matrix = vec![0.0; dim * dim];
        for (i, &d) in diag.iter().enumerate() {
            matrix[i * dim + i] = d;
        }
        Self { dim, matrix }
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_grad<T: Scalar>(&self, params: &[T]) -> Result<(T, Vec<T>)> {
        if params.len() != self.dim {
            return Err(TensorError::DimensionMismatch {
                expected: self.dim,
                got: params.len(),
            });
        }
        let grad: Vec<T> = self
            .matrix
            .chunks(self.dim)
            .map(|row| {
                row.iter()
                    .zip(params)
                    .fold(T::zero(), |acc, (&a, &p)| acc + T::from_f64(a) * p)
            })
            .collect();
        let value = grad
            .iter()
            .zip(params)
            .fold(T::zero(), |acc, (&g, &p)| acc + g * p)
            * T::from_f64(0.5);
        Ok((value, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_quadratic() {
        let q = Quadratic::diagonal(&[3.0, 1.0]);
        for mode in [HvpMode::CentralDifference, HvpMode::ForwardOverReverse] {
            let hv = hessian_vector_product(&q, &[0.3, -0.7], &[1.0, 0.0], mode).unwrap();
            assert!((hv[0] - 3.0).abs() < 1e-9 && hv[1].abs() < 1e-9, "{mode:?}: {hv:?}");
        }
    }

    #[test]
    fn zero_direction() {
        let q = Quadratic::diagonal(&[3.0, 1.0]);
        let hv = hessian_vector_product(&q, &[1.0, 2.0], &[0.0, 0.0], HvpMode::CentralDifference).unwrap();
        assert_eq!(hv, vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let q = Quadratic::diagonal(&[3.0, 1.0]);
        let err = hessian_vector_product(&q, &[1.0, 2.0], &[1.0], HvpMode::CentralDifference);
        assert_eq!(err, Err(TensorError::DimensionMismatch { expected: 2, got: 1 }));
    }
}
