//! Corpus-level data parallelism. Training steps stay single-threaded;
//! only independent per-example jobs (weak labeling, metric scoring,
//! per-document generation) fan out. The `parallel` feature selects
//! rayon; without it everything runs sequentially.

/// Sequential map, always available (used by benchmarks as a baseline).
pub fn map_seq<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    map_seq(items, f)
}
