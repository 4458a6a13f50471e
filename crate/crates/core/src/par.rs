//! Data-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! the same closures sequentially. Results are always returned in input
//! order, so callers get identical output either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, preserving order.
#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized chunk of `data`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.par_chunks_mut(chunk_len.max(1))
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.chunks_mut(chunk_len.max(1))
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Walks two slices in lockstep chunks: `f(i, &mut a[i*la..], &mut b[i*lb..])`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], la: usize, b: &mut [B], lb: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    a.par_chunks_mut(la.max(1))
        .zip(b.par_chunks_mut(lb.max(1)))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], la: usize, b: &mut [B], lb: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    a.chunks_mut(la.max(1))
        .zip(b.chunks_mut(lb.max(1)))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// True when the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
