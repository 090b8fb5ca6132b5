//! Deterministic fan-out of independent jobs.

use rayon::prelude::*;

/// Environment variable that caps the worker count (0 = sequential).
pub const THREADS_ENV: &str = "MRLR_THREADS";

/// Worker count from `MRLR_THREADS`; `None` when unset or unparsable, meaning
/// the default pool.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok()
}

/// Evaluates `f(0..count)` and returns the results in index order.
/// `threads == 0` runs on the calling thread; otherwise a pool of that size
/// is used.
pub fn map_indexed<T, F>(count: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if threads == 0 || count <= 1 {
        return (0..count).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| (0..count).into_par_iter().map(&f).collect()),
        Err(_) => (0..count).map(f).collect(),
    }
}

/// Thread count for sweeps: `MRLR_THREADS` if set, else all cores.
pub fn default_threads() -> usize {
    threads_from_env().unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
