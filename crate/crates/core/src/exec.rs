//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in index order, and every reduction runs over
//! fixed-size chunks whose boundaries do not depend on the thread count, so
//! outputs are bitwise identical across worker counts and across the
//! `parallel` feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How an indexed workload is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Uses the ambient rayon pool. Without the `parallel` feature this runs
    /// sequentially.
    #[default]
    Parallel,
}

/// Chunk length used by ordered reductions.
pub const REDUCE_CHUNK: usize = 64;

/// `(0..n).map(f)` collected in order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Fallible `map_indexed`; the first error in index order wins.
pub fn try_map_indexed<T, E, F>(exec: Exec, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(exec, n, f).into_iter().collect()
}

/// Ordered chunked fold: each chunk of [`REDUCE_CHUNK`] indices is folded
/// sequentially with `fold`, then chunk results are combined left to right
/// with `combine`.
pub fn try_fold_chunks<A, E, Init, Fold, Comb>(
    exec: Exec,
    n: usize,
    init: Init,
    fold: Fold,
    combine: Comb,
) -> Result<A, E>
where
    A: Send,
    E: Send,
    Init: Fn() -> A + Sync + Send,
    Fold: Fn(&mut A, usize) -> Result<(), E> + Sync + Send,
    Comb: Fn(&mut A, A),
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = try_map_indexed(exec, chunks, |c| {
        let mut acc = init();
        let end = ((c + 1) * REDUCE_CHUNK).min(n);
        for i in c * REDUCE_CHUNK..end {
            fold(&mut acc, i)?;
        }
        Ok(acc)
    })?;
    let mut total = init();
    for p in partials {
        combine(&mut total, p);
    }
    Ok(total)
}

/// Runs `f` on a dedicated pool of `workers` threads (`None` = ambient pool).
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if let Some(w) = workers {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
        {
            return pool.install(f);
        }
        log::warn!("could not build a {w}-thread pool; using the global pool");
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    f()
}
