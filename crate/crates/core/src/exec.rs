//! Order-preserving map over independent jobs. With the `parallel` feature
//! jobs run on a rayon pool; without it they run one after another.

use crate::error::Result;

/// Worker count used when none is requested.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Applies `f` to every item and returns the outputs in input order. The
/// first error (in input order) is returned.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    use rayon::prelude::*;
    if workers <= 1 || items.len() <= 1 {
        return seq_map(items, f);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| crate::Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let results: Vec<Result<U>> = pool.install(|| items.par_iter().map(&f).collect());
    results.into_iter().collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: &[T], _workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    seq_map(items, f)
}

/// Sequential reference implementation of [`par_map`].
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    F: Fn(&T) -> Result<U>,
{
    items.iter().map(f).collect()
}
