//! Execution policy for the data-parallel loops (E-step batches, rollouts,
//! gradient accumulation).
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it, or with [`Exec::Sequential`], it runs on the caller's
//! thread. Each work item owns its RNG stream and results are reduced in a
//! fixed order, so both paths produce bit-identical output.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

/// Work items per chunk when accumulating sums; the partition is fixed so
/// floating-point reductions do not depend on the thread count.
pub const REDUCE_CHUNK: usize = 16;

impl Exec {
    /// Order-preserving `(0..n).map(f)`.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Order-preserving `items.iter().map(f)`.
    pub fn map_slice<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    /// Applies `f` to fixed chunks of [`REDUCE_CHUNK`] items and returns the
    /// per-chunk results in order.
    pub fn map_chunks<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&[T]) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items.par_chunks(REDUCE_CHUNK).map(f).collect()
            }
            _ => items.chunks(REDUCE_CHUNK).map(f).collect(),
        }
    }
}

/// Execution policy for a requested thread count: one thread runs
/// sequentially, more size the global rayon pool (first call wins).
pub fn exec_for_threads(threads: Option<usize>) -> Exec {
    match threads {
        Some(0) | None => Exec::default(),
        Some(1) => Exec::Sequential,
        #[cfg(feature = "parallel")]
        Some(n) => {
            if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                log::warn!("thread pool already initialized; DAV_THREADS={n} ignored");
            }
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Exec::Sequential,
    }
}
