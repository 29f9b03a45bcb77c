use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{hessian_vector_product, HvpMode, Objective};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigOptions {
    /// Stop once the relative change of the Rayleigh quotient falls below this.
    pub tol: f64,
    pub max_iters: usize,
    pub mode: HvpMode,
    /// Seed of the random start vectors.
    pub seed: u64,
}

impl Default for EigOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iters: 200,
            mode: HvpMode::CentralDifference,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Leading `k` Hessian eigenvalues at `params` by power iteration with
/// Hotelling deflation, sorted in descending order.
///
/// Power iteration finds the eigenvalues of largest magnitude; near a
/// minimum these are the largest ones. If an eigenvalue fails to converge
/// within `max_iters`, it is returned flagged and the search stops there.
pub fn hessian_top_eigs<O: Objective + ?Sized>(obj: &O, params: &[f64], k: usize, opts: &EigOptions) -> Result<Vec<Eigenpair>> {
    let dim = obj.dim();
    if k == 0 || k > dim {
        return Err(Error::Config(format!("k must lie in 1..={dim}, got {k}")));
    }
    let mut rng = RngStream::derive(opts.seed, "hessian", 0);
    let mut found: Vec<Eigenpair> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        let mut lambda = f64::NAN;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < opts.max_iters {
            iterations += 1;
            let mut w = hessian_vector_product(obj, params, &v, opts.mode)?;
            for e in &found {
                let c = e.value * dot(&v, &e.vector);
                w.iter_mut().zip(&e.vector).for_each(|(w, u)| *w -= c * u);
            }
            let next = dot(&v, &w);
            let wn = norm(&w);
            if wn == 0.0 {
                lambda = 0.0;
                converged = true;
                break;
            }
            let change = (next - lambda).abs();
            lambda = next;
            v = w.into_iter().map(|x| x / wn).collect();
            if change <= opts.tol * lambda.abs() {
                converged = true;
                break;
            }
        }
        found.push(Eigenpair {
            value: lambda,
            vector: v,
            converged,
            iterations,
        });
        if !converged {
            break;
        }
    }
    found.sort_by(|a, b| b.value.total_cmp(&a.value));
    Ok(found)
}
