//! Order-preserving map over slices.
//!
//! With the `parallel` feature the work is spread over the rayon pool,
//! otherwise it runs on the calling thread. Either way results come back in
//! input order, so any reduction the caller performs afterwards is
//! bit-identical between the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Fixed chunk width used when per-item results are folded into a large
/// accumulator. It does not depend on the thread count.
pub const FOLD_CHUNK: usize = 4;

/// Maps `items` in fixed-size chunks, folding each chunk sequentially with
/// `fold`, and returns the per-chunk accumulators in order.
pub fn fold_chunks<T, A, I, F>(items: &[T], init: I, fold: F) -> Vec<A>
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, &T) + Sync + Send,
{
    let chunks: Vec<&[T]> = items.chunks(FOLD_CHUNK).collect();
    map_ordered(&chunks, |chunk| {
        let mut acc = init();
        for item in chunk.iter() {
            fold(&mut acc, item);
        }
        acc
    })
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
