//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work is fanned out over rayon's
//! global pool; without it, or after [`set_sequential`]`(true)`, the same
//! closures run in a plain loop. Results always come back in index order and
//! chunk boundaries never depend on the thread count, so callers that reduce
//! the returned vectors left to right get bit-identical results on both paths.

use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path at runtime (benchmarks compare both paths).
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Split `0..n` into consecutive ranges of at most `chunk` indices.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect()
}

/// Apply `f` to each item, preserving order.
pub fn map<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Apply `f` to each chunk range of `0..n`, preserving order.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges = chunk_ranges(n, chunk);
    map(&ranges, |r| f(r.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range() {
        let r = chunk_ranges(10, 4);
        assert_eq!(r, vec![0..4, 4..8, 8..10]);
        assert!(chunk_ranges(0, 4).is_empty());
    }

    #[test]
    fn order_is_preserved_on_both_paths() {
        let items: Vec<usize> = (0..1000).collect();
        let par = map(&items, |i| i * 2);
        set_sequential(true);
        let seq = map(&items, |i| i * 2);
        set_sequential(false);
        assert_eq!(par, seq);
        assert_eq!(par[999], 1998);
    }
}
