//! Replica-parallel execution.
//!
//! Every work item is identified by an index and draws its randomness from a
//! stream derived from that index, so results do not depend on scheduling.
//! `BTW_THREADS` overrides the worker count.

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("BTW_THREADS").ok().and_then(|s| s.parse::<usize>().ok()).unwrap_or(0);
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
    })
}

pub fn threads() -> usize {
    pool().current_num_threads()
}

/// `f(0), …, f(n-1)` evaluated in parallel, returned in index order.
pub fn map<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    pool().install(|| (0..n).into_par_iter().map(&f).collect())
}

/// Like [`map`], with a per-worker scratch value built by `init`.
pub fn map_with<S, T, I, F>(n: u64, init: I, f: F) -> Vec<T>
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, u64) -> T + Sync + Send,
{
    pool().install(|| (0..n).into_par_iter().map_init(&init, |s, i| f(s, i)).collect())
}
