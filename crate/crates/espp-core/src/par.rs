//! Data-parallel map facade.
//!
//! `map` runs on rayon when the `parallel` feature (default) is enabled and
//! falls back to a plain iterator otherwise; `map_seq` is always sequential.
//! Both preserve input order, so callers stay deterministic either way.
//! Reductions with order-sensitive tie-breaking must stay sequential and
//! operate on the collected results.

#[cfg(feature = "parallel")]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Always-sequential twin of `map`, kept for benchmarking both paths.
pub fn map_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
