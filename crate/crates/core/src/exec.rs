//! Scoped data-parallel map with a bounded worker count.

use std::sync::atomic::{AtomicUsize, Ordering};

/// Worker cap: `PQMOTION_THREADS` if set, otherwise the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("PQMOTION_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// `(0..n).map(f)` evaluated on up to [`worker_count`] threads. Results keep
/// index order, so the output does not depend on scheduling.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = worker_count().min(n);
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let parts: Vec<Vec<(usize, T)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        out.push((i, f(i)));
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    for (i, v) in parts.into_iter().flatten() {
        slots[i] = Some(v);
    }
    slots.into_iter().map(|v| v.expect("every index")).collect()
}
