//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool.
//! Without it, or with [`Exec::Sequential`], everything runs on the calling
//! thread. Callers reduce results in index order, so both paths produce
//! bitwise-identical output.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

pub fn is_parallel_available() -> bool {
    cfg!(feature = "parallel")
}

/// Map `f` over `0..count`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(exec: Exec, count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    match exec {
        Exec::Parallel => (0..count).into_par_iter().map(f).collect(),
        Exec::Sequential => (0..count).map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(_exec: Exec, count: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..count).map(f).collect()
}

/// Map `f` over a slice, preserving order.
pub fn map<T, U, F>(exec: Exec, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_indexed(exec, items.len(), |i| f(&items[i]))
}

/// Fixed chunk boundaries over `0..count`, independent of the thread count.
pub fn chunk_ranges(count: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    let chunk = chunk.max(1);
    (0..count.div_ceil(chunk))
        .map(|i| i * chunk..((i + 1) * chunk).min(count))
        .collect()
}
