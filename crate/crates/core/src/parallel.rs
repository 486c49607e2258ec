//! Slot-deterministic fan-out over scoped threads.
//!
//! Work item `i` always lands in output slot `i`, and callers fold the slots
//! sequentially, so results are bit-identical for every worker count.

/// Evaluates `f(0..n)` across up to `workers` threads (0 = available
/// parallelism) and returns the results in index order.
pub fn par_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = effective_workers(workers, n);
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = Vec::with_capacity(n);
    out.resize_with(n, || None);
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (t, slice) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                let base = t * chunk;
                for (off, slot) in slice.iter_mut().enumerate() {
                    *slot = Some(f(base + off));
                }
            });
        }
    });
    out.into_iter().map(|v| v.expect("worker filled every slot")).collect()
}

pub fn effective_workers(requested: usize, n: usize) -> usize {
    let hw = std::thread::available_parallelism().map(|v| v.get()).unwrap_or(1);
    let w = if requested == 0 { hw } else { requested };
    w.min(n.max(1))
}
