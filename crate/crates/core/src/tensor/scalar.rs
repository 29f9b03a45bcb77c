use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Numeric element type of a [`Tensor`](super::Tensor).
///
/// Implemented for `f32` (training), `f64` (verification) and [`Dual64`]
/// (forward-mode tangents, used to differentiate a gradient along a direction).
/// Comparisons that pick a branch (relu, max-pool) look only at the primal
/// part through [`Scalar::primal`].
pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const NAME: &'static str;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self {
        Self::from_f64(v as f64)
    }
    /// Real (primal) value as f64.
    fn primal(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * op(a) * op(b) + beta * c` on row-major `c` of shape `m x n`.
    ///
    /// `a` is addressed as `a[i * rsa + p * csa]` for `i < m, p < k`, `b` as
    /// `b[p * rsb + j * csb]`, so transposes are expressed through strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
    ) {
        naive_gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c)
    }
}

#[allow(clippy::too_many_arguments)]
fn naive_gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    rsb: usize,
    csb: usize,
    beta: T,
    c: &mut [T],
) {
    let mut row = vec![T::zero(); n];
    for i in 0..m {
        row.iter_mut().for_each(|r| *r = T::zero());
        for p in 0..k {
            let aip = a[i * rsa + p * csa];
            for (j, r) in row.iter_mut().enumerate() {
                *r += aip * b[p * rsb + j * csb];
            }
        }
        let out = &mut c[i * n..(i + 1) * n];
        for (o, r) in out.iter_mut().zip(&row) {
            *o = if beta == T::zero() {
                alpha * *r
            } else {
                beta * *o + alpha * *r
            };
        }
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn primal(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_extent(m, k, rsa, csa, a.len());
        check_extent(k, n, rsb, csb, b.len());
        assert!(c.len() >= m * n);
        // SAFETY: extents were checked against the slice lengths above and
        // `c` is an exclusive borrow of at least m * n elements.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn primal(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_extent(m, k, rsa, csa, a.len());
        check_extent(k, n, rsb, csb, b.len());
        assert!(c.len() >= m * n);
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

fn check_extent(rows: usize, cols: usize, rs: usize, cs: usize, len: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand out of bounds");
}

/// First-order dual number `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual64 {
    pub re: f64,
    pub eps: f64,
}

impl Dual64 {
    pub fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

impl Add for Dual64 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual64 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual64 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual64 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.re / o.re;
        Self::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl Neg for Dual64 {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual64 {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl SubAssign for Dual64 {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl MulAssign for Dual64 {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl Scalar for Dual64 {
    const NAME: &'static str = "dual64";

    fn from_f64(v: f64) -> Self {
        Self::new(v, 0.0)
    }
    fn primal(self) -> f64 {
        self.re
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Self::new(s, self.eps / (2.0 * s))
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Self::new(e, self.eps * e)
    }
    fn ln(self) -> Self {
        Self::new(self.re.ln(), self.eps / self.re)
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gemm_case<T: Scalar>() -> Vec<f64> {
        // [[1,2,3],[4,5,6]] * [[1,0],[0,1],[1,1]]
        let a: Vec<T> = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0].map(T::from_f64).to_vec();
        let b: Vec<T> = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0].map(T::from_f64).to_vec();
        let mut c = vec![T::zero(); 4];
        T::gemm(2, 3, 2, T::one(), &a, 3, 1, &b, 2, 1, T::zero(), &mut c);
        c.into_iter().map(Scalar::primal).collect()
    }

    #[test]
    fn gemm_agrees_across_scalars() {
        let want = vec![4.0, 5.0, 10.0, 11.0];
        assert_eq!(gemm_case::<f32>(), want);
        assert_eq!(gemm_case::<f64>(), want);
        assert_eq!(gemm_case::<Dual64>(), want);
    }

    #[test]
    fn dual_chain_rule() {
        // d/dx ln(exp(x) * x) = 1 + 1/x
        let x = Dual64::new(2.0, 1.0);
        let y = (x.exp() * x).ln();
        assert!((y.eps - 1.5).abs() < 1e-15);
        let s = Dual64::new(4.0, 1.0).sqrt();
        assert_eq!(s, Dual64::new(2.0, 0.25));
    }
}
