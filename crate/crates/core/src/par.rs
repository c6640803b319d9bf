//! Order-preserving parallel map (sequential without the `parallel` feature).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `f` applied to `0..n`, results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Like [`map_indices`] for fallible work; the first error in index order wins.
pub fn try_map_indices<R, F>(n: usize, f: F) -> crate::Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> crate::Result<R> + Sync + Send,
{
    map_indices(n, f).into_iter().collect()
}
