//! Data-parallel iteration with a sequential fallback.
//!
//! With the default `parallel` feature the hot loops (flat index scans, batch
//! embedding, per-file parsing) fan out over rayon; without it the same code
//! compiles to plain iterators. Callers must stick to combinators that exist
//! on both `Iterator` and `ParallelIterator`.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub(crate) fn maybe_par_iter<T: Sync>(items: &[T]) -> rayon::slice::Iter<'_, T> {
    items.par_iter()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn maybe_par_iter<T>(items: &[T]) -> std::slice::Iter<'_, T> {
    items.iter()
}

#[cfg(feature = "parallel")]
pub(crate) fn maybe_par_into_iter<T: Send>(items: Vec<T>) -> rayon::vec::IntoIter<T> {
    items.into_par_iter()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn maybe_par_into_iter<T>(items: Vec<T>) -> std::vec::IntoIter<T> {
    items.into_iter()
}
