//! Optional data parallelism.
//!
//! Kernels fan out over independent work items (batch samples, output
//! planes) and reduce partial results in index order, so a parallel run is
//! bit-identical to the serial one. Serial is the default.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Configure execution. `0` selects the deterministic serial mode; any other
/// value enables rayon with that many worker threads (the global pool can
/// only be sized once per process, later sizes are ignored).
pub fn set_threads(threads: usize) {
    if threads == 0 {
        PARALLEL.store(false, Ordering::SeqCst);
        return;
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    PARALLEL.store(true, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Number of worker threads in use (1 in serial mode).
pub fn thread_count() -> usize {
    if is_parallel() {
        rayon::current_num_threads()
    } else {
        1
    }
}

/// Map `f` over `0..n`, results in index order.
pub(crate) fn map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    if is_parallel() && n > 1 {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Run `f` on consecutive `chunk`-sized pieces of `data`.
pub(crate) fn for_each_chunk<T: Send>(
    data: &mut [T],
    chunk: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    if chunk == 0 {
        return;
    }
    if is_parallel() && data.len() > chunk {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}
