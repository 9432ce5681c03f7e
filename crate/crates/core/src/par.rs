//! Thread-limit plumbing and serial/parallel loop helpers.
//!
//! Every data-parallel loop in the crate goes through this module so that the
//! `parallel` feature (and a runtime thread limit) swap implementations in one
//! place. All helpers partition work identically in serial and parallel mode
//! and only ever hand out disjoint `&mut` regions, so results are bitwise
//! identical regardless of thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

/// 0 means "library default" (all cores when the `parallel` feature is on).
static THREAD_LIMIT: AtomicUsize = AtomicUsize::new(0);

/// Caps the number of worker threads used by all subsequent parallel loops.
/// `0` restores the default. A limit of 1 runs loops inline on the caller.
pub fn set_thread_limit(n: usize) {
    THREAD_LIMIT.store(n, Ordering::SeqCst);
}

pub fn thread_limit() -> usize {
    THREAD_LIMIT.load(Ordering::SeqCst)
}

/// Number of threads loops will actually use right now.
pub fn effective_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        match thread_limit() {
            0 => rayon::current_num_threads(),
            n => n,
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(feature = "parallel")]
mod pool {
    use std::sync::{Arc, Mutex, OnceLock};

    // Pools are cached per limit so repeated limit flips don't rebuild threads.
    static CACHE: OnceLock<Mutex<Vec<(usize, Arc<rayon::ThreadPool>)>>> = OnceLock::new();

    pub fn for_limit(n: usize) -> Arc<rayon::ThreadPool> {
        let cache = CACHE.get_or_init(|| Mutex::new(Vec::new()));
        let mut guard = cache.lock().unwrap();
        if let Some((_, pool)) = guard.iter().find(|(limit, _)| *limit == n) {
            return pool.clone();
        }
        let pool = Arc::new(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("failed to build worker pool"),
        );
        guard.push((n, pool.clone()));
        pool
    }
}

/// Runs `f(index, &mut items[index])` for every element.
pub fn for_each_indexed<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match thread_limit() {
            1 => items.iter_mut().enumerate().for_each(|(i, t)| f(i, t)),
            0 => items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t)),
            n => pool::for_limit(n)
                .install(|| items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t))),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
    }
}

/// Splits `items` into consecutive chunks of `chunk_len` (the last may be
/// shorter) and runs `f(chunk_index, chunk)` on each. The partition does not
/// depend on the thread count.
pub fn for_each_chunk<T, F>(items: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match thread_limit() {
            1 => items.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)),
            0 => items
                .par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
            n => pool::for_limit(n).install(|| {
                items
                    .par_chunks_mut(chunk_len)
                    .enumerate()
                    .for_each(|(i, c)| f(i, c))
            }),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_partition_is_thread_independent() {
        let run = |limit: usize| {
            set_thread_limit(limit);
            let mut data = vec![0u64; 1000];
            for_each_chunk(&mut data, 64, |ci, chunk| {
                for (k, v) in chunk.iter_mut().enumerate() {
                    *v = (ci as u64) << 32 | k as u64;
                }
            });
            set_thread_limit(0);
            data
        };
        let serial = run(1);
        let parallel = run(0);
        assert_eq!(serial, parallel);
    }

    #[test]
    fn indexed_loop_touches_every_slot_once() {
        let mut data = vec![0u32; 257];
        for_each_indexed(&mut data, |i, v| *v = i as u32 + 1);
        for (i, v) in data.iter().enumerate() {
            assert_eq!(*v, i as u32 + 1);
        }
    }

    #[test]
    fn effective_threads_respects_limit() {
        set_thread_limit(1);
        assert_eq!(effective_threads(), 1);
        set_thread_limit(0);
        assert!(effective_threads() >= 1);
    }
}
