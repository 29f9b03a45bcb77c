//! Job-level parallelism.
//!
//! With the `parallel` feature, independent jobs (grid cells, branch pairs,
//! probe points, evaluation chunks) fan out over a rayon pool. Without it every
//! helper runs the same closure sequentially. Results always come back in
//! input order, so outputs never depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs `f` with at most `workers` threads available to [`par_map`].
///
/// `workers == 0` uses every available core; `workers == 1` is sequential.
pub fn with_workers<R, F>(workers: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}

/// Whether this build can run jobs concurrently.
pub fn available() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..100).collect();
        let ys = with_workers(4, || par_map(&xs, |x| x * x));
        assert_eq!(ys, xs.iter().map(|x| x * x).collect::<Vec<_>>());
        assert_eq!(with_workers(1, || par_map(&xs, |x| x + 1))[99], 100);
    }
}
