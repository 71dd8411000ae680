//! Deterministic fan-out over independent work items.
//!
//! Work is only ever split across *outputs*; each item is computed by exactly
//! one thread and results are stitched back in index order, so results do not
//! depend on the thread count.

use std::sync::OnceLock;

static THREADS: OnceLock<usize> = OnceLock::new();

/// Kernel thread cap, read once from `JERS_THREADS` (default 1).
pub fn threads() -> usize {
    *THREADS.get_or_init(|| {
        std::env::var("JERS_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(1)
    })
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let t = threads().min(n);
    if t <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..t)
            .map(|w| scope.spawn(move || (w..n).step_by(t).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every index computed"))
        .collect()
}
