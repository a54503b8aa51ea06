//! Lifelong experiment driver: runs methods over task suites and reports results.

pub mod config;
pub mod lifelong;
pub mod metrics;
pub mod report;
pub mod selftest;

use rayon::prelude::*;

/// Concurrent runs allowed by `DMEA_THREADS`, defaulting to the core count.
pub fn thread_limit() -> usize {
    std::env::var("DMEA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Maps `f` over `items` on at most [`thread_limit`] threads, keeping order.
pub fn run_parallel<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match rayon::ThreadPoolBuilder::new().num_threads(thread_limit()).build() {
        Ok(pool) => pool.install(|| items.into_par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running sequentially");
            items.into_iter().map(f).collect()
        }
    }
}
