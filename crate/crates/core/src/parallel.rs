//! Optional data parallelism, capped by `GENROBUST_THREADS`.
//!
//! Unset or `0` means serial execution. Results are always collected in
//! index order, so parallel and serial runs return identical values.

use std::sync::OnceLock;

use rayon::prelude::*;

pub const THREADS_ENV: &str = "GENROBUST_THREADS";

/// Worker count requested through the environment (0 = serial).
pub fn configured_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = configured_threads();
        (n > 0)
            .then(|| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok())
            .flatten()
    })
    .as_ref()
}

/// `(0..n).map(f)`, possibly spread over the worker pool.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match pool() {
        Some(p) if n > 1 => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        _ => (0..n).map(f).collect(),
    }
}
