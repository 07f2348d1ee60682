//! Data-parallel dispatch helpers.
//!
//! Every helper here has the same contract: the closure writes only into the
//! slice (or produces only the value) it is handed, so results are bitwise
//! identical regardless of worker count. With the `parallel` feature disabled
//! the same code runs on plain iterators.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Cap the global worker pool. `0` keeps the default (all cores). Returns
/// false if the pool was already initialized (e.g. called twice).
pub fn configure_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        if n == 0 {
            return true;
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        true
    }
}

/// Split `data` into consecutive `chunk`-sized pieces and run `f(index, piece)`
/// on each. The last piece may be shorter.
pub fn for_each_chunk_mut<F>(data: &mut [f32], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Map `0..n` through `f` and collect the results in index order.
pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
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

/// Sequential twins of the helpers above, kept callable under any feature set
/// so benchmarks can compare both code paths in a single build.
pub mod seq {
    pub fn for_each_chunk_mut<F>(data: &mut [f32], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f32]),
    {
        assert!(chunk > 0, "chunk size must be positive");
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R,
    {
        (0..n).map(f).collect()
    }
}
