//! Activation-memory accounting.
//!
//! Every tape node reports the scalars it retains for the backward pass
//! (its value plus any saved intermediates), and the backward pass reports
//! gradient buffers and releases. Counts are kept per thread in a stack of
//! tracking regions so that nested [`track`] calls compose.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

/// Live and peak retained-scalar counts for one tracking region.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemStats {
    pub live_scalars: usize,
    pub peak_scalars: usize,
    /// Scalars allocated per op kind (allocation totals, not live counts).
    pub per_op: BTreeMap<&'static str, usize>,
}

impl MemStats {
    pub fn reset(&mut self) {
        self.live_scalars = 0;
        self.peak_scalars = 0;
        self.per_op.clear();
    }

    fn alloc(&mut self, n: usize, label: &'static str) {
        self.live_scalars += n;
        self.peak_scalars = self.peak_scalars.max(self.live_scalars);
        *self.per_op.entry(label).or_insert(0) += n;
    }

    fn free(&mut self, n: usize) {
        // Releases of scalars allocated before the region opened are clamped.
        self.live_scalars = self.live_scalars.saturating_sub(n);
    }
}

thread_local! {
    static REGIONS: RefCell<Vec<MemStats>> = const { RefCell::new(Vec::new()) };
    static BUDGET: Cell<Option<(usize, usize)>> = const { Cell::new(None) };
    static EXCEEDED: Cell<bool> = const { Cell::new(false) };
}

pub(crate) fn record_alloc(n: usize, label: &'static str) {
    if n == 0 {
        return;
    }
    REGIONS.with(|r| {
        let mut frames = r.borrow_mut();
        for frame in frames.iter_mut() {
            frame.alloc(n, label);
        }
        if let Some((depth, limit)) = BUDGET.with(Cell::get) {
            if frames.get(depth).is_some_and(|f| f.live_scalars > limit) {
                EXCEEDED.with(|e| e.set(true));
            }
        }
    });
}

pub(crate) fn record_free(n: usize) {
    if n == 0 {
        return;
    }
    REGIONS.with(|r| {
        for frame in r.borrow_mut().iter_mut() {
            frame.free(n);
        }
    });
}

/// Runs `f` inside a tracking region and returns its result together with
/// the region's memory statistics. Regions nest: allocations inside an
/// inner region are also charged to every enclosing region.
pub fn track<R>(label: &str, f: impl FnOnce() -> R) -> (R, MemStats) {
    let _ = label;
    REGIONS.with(|r| r.borrow_mut().push(MemStats::default()));
    struct Pop;
    impl Drop for Pop {
        fn drop(&mut self) {
            REGIONS.with(|r| {
                r.borrow_mut().pop();
            });
        }
    }
    let guard = Pop;
    let out = f();
    let stats = REGIONS.with(|r| r.borrow().last().cloned().unwrap_or_default());
    drop(guard);
    (out, stats)
}

/// Runs `f` in a tracking region whose live count may not exceed `limit`
/// scalars. Long-running computations poll [`budget_exceeded`] and bail
/// out; the flag is also returned.
pub fn track_with_budget<R>(label: &str, limit: Option<usize>, f: impl FnOnce() -> R) -> (R, MemStats, bool) {
    let depth = REGIONS.with(|r| r.borrow().len());
    let saved = BUDGET.with(|b| b.replace(limit.map(|l| (depth, l))));
    let saved_flag = EXCEEDED.with(|e| e.replace(false));
    struct Restore(Option<(usize, usize)>, bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            BUDGET.with(|b| b.set(self.0));
            EXCEEDED.with(|e| e.set(self.1));
        }
    }
    let guard = Restore(saved, saved_flag);
    let (out, stats) = track(label, f);
    let exceeded = EXCEEDED.with(Cell::get);
    drop(guard);
    (out, stats, exceeded)
}

/// The limit of the innermost budgeted region if it has been exceeded.
pub fn budget_exceeded() -> Option<usize> {
    if EXCEEDED.with(Cell::get) {
        BUDGET.with(Cell::get).map(|(_, limit)| limit)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_region_is_zero() {
        let ((), stats) = track("empty", || {});
        assert_eq!(stats.live_scalars, 0);
        assert_eq!(stats.peak_scalars, 0);
    }

    #[test]
    fn nested_regions_charge_outer() {
        let ((_, inner), outer) = track("outer", || {
            record_alloc(10, "a");
            let r = track("inner", || {
                record_alloc(5, "b");
                record_free(5);
            });
            record_free(10);
            r
        });
        assert_eq!(inner.peak_scalars, 5);
        assert_eq!(outer.peak_scalars, 15);
        assert!(outer.peak_scalars >= inner.peak_scalars);
        assert_eq!(outer.live_scalars, 0);
        assert_eq!(outer.per_op["a"], 10);
    }

    #[test]
    fn budget_flags_overrun() {
        let (seen, stats, exceeded) = track_with_budget("b", Some(8), || {
            record_alloc(5, "a");
            let early = budget_exceeded();
            record_alloc(5, "a");
            (early, budget_exceeded())
        });
        assert_eq!(seen, (None, Some(8)));
        assert!(exceeded);
        assert_eq!(stats.peak_scalars, 10);
        assert_eq!(budget_exceeded(), None);
        let (_, _, exceeded) = track_with_budget("b", None, || record_alloc(1 << 20, "a"));
        assert!(!exceeded);
    }

    #[test]
    fn reset_clears() {
        let mut s = MemStats::default();
        s.alloc(3, "x");
        s.reset();
        assert_eq!(s, MemStats::default());
    }

    #[test]
    fn untracked_allocations_are_ignored() {
        record_alloc(100, "x");
        let ((), s) = track("r", || record_free(100));
        assert_eq!(s.live_scalars, 0);
    }
}
