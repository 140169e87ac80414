//! Worker-pool plumbing for the drivers that fan out over images.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{invalid, Result};

/// Worker cap: `POSEKIT_THREADS` when set, otherwise the machine's available
/// parallelism. A set-but-unparsable value is rejected rather than silently
/// ignored.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("POSEKIT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => invalid(format!("POSEKIT_THREADS: bad thread count {v:?}")),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Apply `f` to every item on up to `workers` threads and return the results
/// in input order. When several items fail, the lowest-index error wins, so
/// the outcome does not depend on thread scheduling.
pub fn par_map_ordered<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }

    let next = AtomicUsize::new(0);
    let buckets: Vec<Vec<(usize, Result<U>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break;
                        }
                        local.push((i, f(i, &items[i])));
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });

    let mut slots: Vec<Option<Result<U>>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    for (i, r) in buckets.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots
        .into_iter()
        .map(|s| s.expect("every index visited exactly once"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_matches_serial_in_order() {
        let items: Vec<usize> = (0..97).collect();
        let serial: Vec<usize> = items.iter().map(|&v| v * v + 1).collect();
        let par = par_map_ordered(&items, 3, |_, &v| Ok(v * v + 1)).unwrap();
        assert_eq!(par, serial);
    }

    #[test]
    fn lowest_index_error_wins() {
        let items: Vec<usize> = (0..64).collect();
        let r = par_map_ordered(&items, 4, |_, &v| {
            if v == 30 || v == 57 {
                invalid(format!("item {v}"))
            } else {
                Ok(v)
            }
        });
        let msg = r.unwrap_err().to_string();
        assert!(msg.contains("item 30"), "expected the earliest failure, got {msg}");
    }

    #[test]
    fn empty_input_yields_empty_output() {
        let out: Vec<u8> = par_map_ordered(&[] as &[u8], 8, |_, &v| Ok(v)).unwrap();
        assert!(out.is_empty());
    }
}
