//! Data-parallel execution helpers.
//!
//! The crate parallelizes only over fully independent units of work
//! (episodes, runs, trials, row blocks of a matmul), each writing to its
//! own output slot, so parallel and sequential execution produce
//! bit-identical results. With the `parallel` feature disabled the
//! helpers fall back to plain loops and rayon is not compiled at all;
//! with it enabled, [`Mode::Sequential`] still forces the plain loop at
//! runtime (used by the benchmarks to compare both paths).

use std::sync::atomic::{AtomicU8, Ordering};

/// Execution mode for the data-parallel helpers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

/// Set the process-wide default execution mode.
pub fn set_mode(mode: Mode) {
    MODE.store(if mode == Mode::Parallel { 1 } else { 0 }, Ordering::Relaxed);
}

/// Current process-wide execution mode.
pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Map `0..n` through `f`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    map_indexed_with(mode(), n, f)
}

/// Like [`map_indexed`] but with an explicit mode (benchmarks use this).
pub fn map_indexed_with<T, F>(mode: Mode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    if mode == Mode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(|i| f(i)).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Run `f` over disjoint mutable chunks of `out`, `chunk` rows each.
/// `f(chunk_index, chunk_slice)` must only write its own chunk.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let a = map_indexed_with(Mode::Sequential, 100, |i| i * i);
        let b = map_indexed_with(mode(), 100, |i| i * i);
        assert_eq!(a, b);
    }
}
