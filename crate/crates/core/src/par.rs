//! Replica fan-out. With the `parallel` feature (default) work is spread over
//! a rayon pool; without it the same closures run sequentially. Results are
//! always returned in index order, so outputs do not depend on the backend.

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "IBM_SIM_THREADS";

/// Configures the global pool from `IBM_SIM_THREADS`. Safe to call more than
/// once; later calls are ignored.
pub fn init_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// `(0..n).map(f).collect()`, in parallel when enabled.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential reference used by benches and tests.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_indexed`]; returns the first error by index.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}
