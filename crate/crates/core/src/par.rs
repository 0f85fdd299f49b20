//! Thin wrappers that run particle loops on rayon when the `parallel`
//! feature is on and sequentially otherwise. Results never depend on the
//! schedule: every closure writes only its own chunk.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Calls `f(state, index, chunk)` for each `width`-sized chunk of `out`,
/// with `state` created once per worker by `init`.
pub(crate) fn for_each_chunk<S, I, F>(out: &mut [f64], width: usize, init: I, f: F)
where
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(width)
        .enumerate()
        .for_each_init(init, |s, (i, c)| f(s, i, c));
    #[cfg(not(feature = "parallel"))]
    {
        let mut s = init();
        for (i, c) in out.chunks_mut(width).enumerate() {
            f(&mut s, i, c);
        }
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel, order preserved.
pub(crate) fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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
