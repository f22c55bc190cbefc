//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they are plain iterator loops. Results are always returned in index order,
//! so reductions over them are deterministic regardless of thread count.

use crate::error::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether `n` items are worth handing to the pool. A one-thread pool only
/// adds hand-off cost.
fn pooled(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        n > 1 && rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        false
    }
}

pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if pooled(n) {
        #[cfg(feature = "parallel")]
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

pub fn try_map_range<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if pooled(n) {
        #[cfg(feature = "parallel")]
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Maps `0..n` while summing the gradient each item writes into a `len`-long
/// buffer. The sum runs in index order on both paths, so the result does not
/// depend on the thread count. Sequentially a single buffer is reused, which
/// saves a large allocation per item.
pub fn try_map_accumulate<T, F>(n: usize, len: usize, f: F) -> Result<(Vec<T>, Vec<f64>)>
where
    T: Send,
    F: Fn(usize, &mut [f64]) -> Result<T> + Sync + Send,
{
    if pooled(n) {
        #[cfg(feature = "parallel")]
        {
            let parts: Vec<(T, Vec<f64>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut g = vec![0.0; len];
                    f(i, &mut g).map(|t| (t, g))
                })
                .collect::<Result<_>>()?;
            let (items, grads): (Vec<T>, Vec<Vec<f64>>) = parts.into_iter().unzip();
            return Ok((items, sum_ordered(&grads, len)));
        }
    }
    let mut acc = vec![0.0; len];
    let items = (0..n).map(|i| f(i, &mut acc)).collect::<Result<Vec<T>>>()?;
    Ok((items, acc))
}

/// Sums equally sized vectors in index order.
pub fn sum_ordered(parts: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// Caps the global worker pool. A no-op without the `parallel` feature or if
/// the pool has already been initialised.
pub fn configure_threads(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Reads `LEAPFLOW_THREADS` and applies it via [`configure_threads`].
pub fn configure_from_env() {
    let n = std::env::var("LEAPFLOW_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok());
    configure_threads(n);
}

/// Runs `f` on a single worker thread. Used to compare against the pooled path.
pub fn run_single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}
