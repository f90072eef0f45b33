//! Index-parallel map used by the data-parallel stages.
//!
//! With the `parallel` feature the work is spread over the current rayon
//! pool; without it the same closure runs sequentially. Each index is
//! computed independently and results are collected in index order, so
//! output is bitwise identical in both modes and for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Whether this build runs the data-parallel stages on rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
