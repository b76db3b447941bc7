//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) batch maps and large sparse
//! products fan out over the rayon pool. Every parallel path computes each
//! output element independently and in the same order as the sequential
//! path, so results are bit-identical either way.

/// Row count above which sparse products are split across threads.
pub const PAR_MIN_NNZ: usize = 32_768;

/// Sequential map, always available.
pub fn map_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Map over a batch, in parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_seq(items, f)
}

/// Fill `out[i] = f(i)` for every index.
#[cfg(feature = "parallel")]
pub fn fill_indexed<F>(out: &mut [f64], parallel: bool, f: F)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    use rayon::prelude::*;
    if parallel {
        out.par_iter_mut().enumerate().for_each(|(i, o)| *o = f(i));
    } else {
        out.iter_mut().enumerate().for_each(|(i, o)| *o = f(i));
    }
}

#[cfg(not(feature = "parallel"))]
pub fn fill_indexed<F>(out: &mut [f64], _parallel: bool, f: F)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    out.iter_mut().enumerate().for_each(|(i, o)| *o = f(i));
}

/// True when this build fans work out over threads.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
