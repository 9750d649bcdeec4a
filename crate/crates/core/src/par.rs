//! Data-parallel helpers. With the `parallel` feature the work is spread
//! over the rayon pool; without it, or after [`set_enabled(false)`], every
//! helper runs the same closure sequentially.
//!
//! Every helper hands each index to exactly one closure call and collects
//! results in index order, so parallel and sequential runs produce
//! bit-identical output.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Below this many scalar operations a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Switches parallel execution on or off at runtime. Has no effect when
/// the crate is built without the `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn enabled() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

/// Worker threads available to the helpers.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    if enabled() {
        return rayon::current_num_threads();
    }
    1
}

/// Calls `f(index, chunk)` for each `chunk_size` piece of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_size: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_size == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if enabled() && work >= MIN_PARALLEL_WORK && data.len() > chunk_size {
        data.par_chunks_mut(chunk_size)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    data.chunks_mut(chunk_size)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps every item through `f`, preserving order.
pub fn map_mut<I, R, F>(items: &mut [I], f: F) -> Vec<R>
where
    I: Send,
    R: Send,
    F: Fn(usize, &mut I) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if enabled() && items.len() > 1 {
        return items
            .par_iter_mut()
            .enumerate()
            .map(|(i, it)| f(i, it))
            .collect();
    }
    items.iter_mut().enumerate().map(|(i, it)| f(i, it)).collect()
}
