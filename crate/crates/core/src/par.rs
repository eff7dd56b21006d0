//! Data-parallel helpers. With the `parallel` feature these run on the rayon
//! pool; without it they are plain sequential loops with identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential counterpart of [`map_range`], always available.
pub fn map_range_serial<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Rows per accumulator in [`fold_range`]. Fixed so the reduction order,
/// and therefore the floating-point result, does not depend on the thread count.
pub const FOLD_CHUNK: usize = 16;

/// Folds `0..n` in fixed-size chunks and merges the chunk accumulators in
/// index order. Parallel and serial builds give bit-identical results.
pub fn fold_range<A, I, F, M>(n: usize, init: I, fold: F, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(A, usize) -> A + Sync + Send,
    M: Fn(A, A) -> A,
{
    let chunks = n.div_ceil(FOLD_CHUNK);
    let parts = map_range(chunks, |c| {
        let lo = c * FOLD_CHUNK;
        let hi = (lo + FOLD_CHUNK).min(n);
        (lo..hi).fold(init(), &fold)
    });
    merge_in_order(parts, init, merge)
}

pub fn fold_range_serial<A, I, F, M>(n: usize, init: I, fold: F, merge: M) -> A
where
    I: Fn() -> A,
    F: Fn(A, usize) -> A,
    M: Fn(A, A) -> A,
{
    let chunks = n.div_ceil(FOLD_CHUNK);
    let parts = map_range_serial(chunks, |c| {
        let lo = c * FOLD_CHUNK;
        let hi = (lo + FOLD_CHUNK).min(n);
        (lo..hi).fold(init(), &fold)
    });
    merge_in_order(parts, init, merge)
}

fn merge_in_order<A, I, M>(parts: Vec<A>, init: I, merge: M) -> A
where
    I: Fn() -> A,
    M: Fn(A, A) -> A,
{
    let mut iter = parts.into_iter();
    match iter.next() {
        Some(first) => iter.fold(first, merge),
        None => init(),
    }
}

/// Configures the global worker pool. No-op without the `parallel` feature.
pub fn set_threads(threads: usize) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(())
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
