//! Execution helpers: data-parallel voxel loops with a sequential fallback.
//!
//! With the `parallel` feature (default) the loops run on rayon; without it
//! they are plain iterators. Both paths write each output slot exactly once
//! from a pure function of the index, so results are bitwise identical
//! regardless of feature flags or worker count.

/// Elements per work chunk in voxel loops. Large enough to amortize task
/// dispatch, small enough to load-balance 3-D rasters.
pub(crate) const CHUNK: usize = 8 * 1024;

/// Apply `f(chunk_offset, chunk)` over `data` split into `chunk_len`-element
/// chunks. `chunk_offset` is the index of the chunk's first element.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i * chunk_len, chunk));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i * chunk_len, chunk);
    }
}

/// Map `f` over `0..n` and collect results in index order.
#[cfg(feature = "parallel")]
pub(crate) fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}
