//! Order-preserving data-parallel helpers.
//!
//! Hot loops (isolation-forest construction, batch scoring, kernel sums,
//! candidate scoring, per-seed experiments) run through these functions.
//! With the `parallel` feature (default) they fan out over rayon; without
//! it they degrade to plain iterators. Results are always collected in
//! input order and reduced sequentially by callers, so output is
//! bit-identical regardless of feature flags or thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many items the fan-out overhead is not worth it.
const MIN_PAR_LEN: usize = 16;

/// Maps `f` over a slice, order preserved.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if items.len() >= MIN_PAR_LEN {
        return items.par_iter().map(&f).collect();
    }
    items.iter().map(&f).collect()
}

/// Maps `f` over `0..n`, order preserved.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if n >= MIN_PAR_LEN {
        return (0..n).into_par_iter().map(&f).collect();
    }
    (0..n).map(&f).collect()
}

/// Sequential twin of [`map_slice`], kept as an explicit entry point for
/// the benchmark suite that compares both execution modes.
pub fn map_slice_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Sequential twin of [`map_range`].
pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
