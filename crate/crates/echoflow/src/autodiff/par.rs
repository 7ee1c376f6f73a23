//! Work distribution for the channel-parallel kernel paths.
//!
//! Convolutions split their work by channel plane: every output element is
//! written by exactly one worker, which runs the same inner loops in the same
//! order as the serial code. Results are therefore bitwise identical for any
//! thread count, including 1; there is no cross-thread reduction anywhere.

use std::sync::atomic::{AtomicUsize, Ordering};

/// 0 means "not chosen yet"; resolved lazily on first use.
static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Number of worker threads kernel calls may use. Defaults to the value of
/// `ECHOFLOW_THREADS` if set, otherwise to the available parallelism.
pub fn thread_count() -> usize {
    let n = THREADS.load(Ordering::Relaxed);
    if n != 0 {
        return n;
    }
    let n = std::env::var("ECHOFLOW_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    THREADS.store(n, Ordering::Relaxed);
    n
}

/// Override the worker thread count (e.g. from a CLI flag). Clamped to >= 1.
pub fn set_thread_count(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

/// Split `data` into consecutive `chunk_len`-sized chunks and run
/// `f(chunk_index, chunk)` for each, distributing contiguous runs of chunks
/// over the worker threads. `data.len()` must be a multiple of `chunk_len`.
pub fn for_each_chunk<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    debug_assert_eq!(data.len() % chunk_len.max(1), 0);
    let n_chunks = data.len() / chunk_len.max(1);
    let nt = thread_count().min(n_chunks);
    if nt <= 1 {
        for (i, c) in data.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
        return;
    }
    let per = n_chunks.div_ceil(nt);
    std::thread::scope(|s| {
        let mut rest = data;
        let mut next = 0;
        while !rest.is_empty() {
            let take = (per * chunk_len).min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            rest = tail;
            let first = next;
            next += take / chunk_len;
            let f = &f;
            s.spawn(move || {
                for (j, c) in head.chunks_mut(chunk_len).enumerate() {
                    f(first + j, c);
                }
            });
        }
    });
}
