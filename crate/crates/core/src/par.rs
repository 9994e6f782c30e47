//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the maps run on the rayon pool; without it
//! they run in place. Output order always follows input order, and chunked
//! reductions use fixed chunk boundaries, so results are bit-identical
//! between the two builds and across thread counts.

/// Chunk length used by ordered reductions.
pub const CHUNK: usize = 128;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
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

/// Applies `f(offset, chunk)` to consecutive chunks of length [`CHUNK`].
pub fn map_chunks<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(i, c)| f(i * CHUNK, c))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items
            .chunks(CHUNK)
            .enumerate()
            .map(|(i, c)| f(i * CHUNK, c))
            .collect()
    }
}

/// Maps `f` over `items` and folds the results left to right.
pub fn map_reduce<T, R, F, G>(items: &[T], f: F, init: R, fold: G) -> R
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
    G: FnMut(R, R) -> R,
{
    map_chunks(items, f).into_iter().fold(init, fold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let ys = map(&xs, |x| x * 2);
        assert!(ys.iter().enumerate().all(|(i, &y)| y == 2 * i as u64));
        let zs = map_range(17, |i| i);
        assert_eq!(zs, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn chunked_reduction_matches_fixed_chunking() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin() * 1e-3).collect();
        let got = map_reduce(&xs, |_, c| c.iter().sum::<f64>(), 0.0, |a, b| a + b);
        let expect = xs.chunks(CHUNK).map(|c| c.iter().sum::<f64>()).fold(0.0, |a, b| a + b);
        assert_eq!(got.to_bits(), expect.to_bits());
    }
}
