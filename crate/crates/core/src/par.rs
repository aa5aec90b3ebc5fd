//! Data-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! sequentially. Results never depend on the thread count: work is split into
//! fixed index ranges and partial results are combined in index order.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed chunk length used for ordered reductions.
pub const REDUCE_CHUNK: usize = 64;

/// Evaluates `f` at every index in `0..n`, preserving order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
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

/// Maps over a slice, preserving order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Splits `0..n` into ranges of `REDUCE_CHUNK`, evaluates `f` on each range
/// and folds the partial results left to right with `combine`.
pub fn chunked_reduce<T, F, C>(n: usize, init: T, f: F, combine: C) -> T
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
    C: Fn(T, T) -> T,
{
    let chunks: Vec<Range<usize>> = (0..n)
        .step_by(REDUCE_CHUNK)
        .map(|s| s..(s + REDUCE_CHUNK).min(n))
        .collect();
    let partials = map_slice(&chunks, |r| f(r.clone()));
    partials.into_iter().fold(init, combine)
}

/// Number of worker threads the current context would use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Runs `f` restricted to a single worker thread.
///
/// Used by the benchmarks to compare against the sequential path inside one
/// binary.
pub fn with_single_thread<R: Send, F: FnOnce() -> R + Send>(f: F) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indices(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }

    #[test]
    fn chunked_reduce_is_thread_count_independent() {
        let f = |r: Range<usize>| r.map(|i| (i as f64).sin() * 1e-3).sum::<f64>();
        let a = chunked_reduce(10_000, 0.0, f, |a, b| a + b);
        let b = with_single_thread(|| chunked_reduce(10_000, 0.0, f, |a, b| a + b));
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
