//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, chunk loops go through rayon; without it they
//! are plain iterator loops. Each output chunk is written by exactly one task
//! and every reduction inside a chunk runs in a fixed order, so results are
//! bit-identical whatever the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many output elements a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_LEN: usize = 4096;

/// Calls `f(chunk_index, chunk)` for every `chunk`-sized piece of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if out.len() >= MIN_PARALLEL_LEN && out.len() > chunk {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` through `f` and collects in index order.
pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Runs `f` with intra-op parallelism capped at `threads` (0 = all cores).
pub fn with_threads<R: Send, F: FnOnce() -> R + Send>(threads: usize, f: F) -> R {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build thread pool");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Sets the process-wide thread cap. Only the first call has an effect.
pub fn init_global_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
    }
}

/// Whether the crate was compiled with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_everything_once() {
        let mut v = vec![0usize; 10_000];
        for_each_chunk(&mut v, 7, |i, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x += i * 7 + j;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| i == x));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let run = || {
            let mut v = vec![0.0f64; 50_000];
            for_each_chunk(&mut v, 100, |i, c| {
                let mut acc = 0.0;
                for (j, x) in c.iter_mut().enumerate() {
                    acc += ((i * 100 + j) as f64).sin();
                    *x = acc;
                }
            });
            v
        };
        assert_eq!(with_threads(1, run), with_threads(4, run));
    }
}
