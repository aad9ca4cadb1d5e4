//! Worker-thread configuration.
//!
//! Kernels parallelize over fixed work partitions and merge in a fixed order,
//! so the thread count changes speed but not results.

use rayon::{ThreadPool, ThreadPoolBuilder};

pub const THREADS_ENV: &str = "VOXSYNTH_THREADS";

/// Thread cap from `VOXSYNTH_THREADS`, or `None` when unset or invalid.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

pub fn thread_pool(threads: usize) -> ThreadPool {
    ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool builds")
}

/// Runs `f` on a pool capped by `threads`, or by `VOXSYNTH_THREADS` when
/// `threads` is `None`, or on the ambient pool when neither is set.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads.or_else(threads_from_env) {
        Some(n) => thread_pool(n).install(f),
        None => f(),
    }
}
