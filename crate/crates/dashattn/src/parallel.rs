//! Dispatch layer between rayon and plain sequential loops.
//!
//! Each output element is produced by exactly one task with a fixed internal
//! accumulation order, so results are bit-identical with and without the
//! `parallel` feature and independent of the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..len`, collecting results in index order.
pub(crate) fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}

/// Fallible variant of [`map_indexed`]; the first error wins.
pub(crate) fn try_map_indexed<T, F>(len: usize, f: F) -> crate::Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> crate::Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}

/// Runs `f(row_index, row_slice)` over disjoint `width`-sized rows of `data`.
pub(crate) fn for_each_row_mut<T, F>(data: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(width > 0 && data.len() % width == 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// Fallible variant of [`for_each_row_mut`] that also collects one value
/// per row, in row order; the first error wins.
pub(crate) fn try_map_rows_mut<T, R, F>(
    data: &mut [T],
    width: usize,
    f: F,
) -> crate::Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut [T]) -> crate::Result<R> + Sync + Send,
{
    debug_assert!(width > 0 && data.len() % width == 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(width).enumerate().map(|(i, row)| f(i, row)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(width).enumerate().map(|(i, row)| f(i, row)).collect()
    }
}
