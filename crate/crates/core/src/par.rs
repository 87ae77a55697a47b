//! Indexed parallel map with a sequential fallback.
//!
//! Results always come back in index order, so callers see the same output
//! for any worker count. Without the `parallel` feature, or with
//! `workers == 1`, the map runs on the calling thread.

use crate::error::{Error, Result};

/// Worker count matching the machine, at least 1.
pub fn available_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Evaluate `f(0..n)` and return the results in index order. On failure the
/// error of the lowest failing index is returned.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if workers == 0 {
        return Err(Error::Config("worker count must be >= 1".into()));
    }
    let results = run(n, workers, &f)?;
    results.into_iter().collect()
}

#[cfg(feature = "parallel")]
fn run<T, F>(n: usize, workers: usize, f: &F) -> Result<Vec<Result<T>>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;

    if workers == 1 || n <= 1 {
        return Ok((0..n).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

#[cfg(not(feature = "parallel"))]
fn run<T, F>(n: usize, _workers: usize, f: &F) -> Result<Vec<Result<T>>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    Ok((0..n).map(f).collect())
}
