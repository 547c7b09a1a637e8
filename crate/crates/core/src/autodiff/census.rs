//! Per-thread count of live recording tapes, used for memory accounting.

use std::cell::Cell;

/// What a tape records; only [`TapeKind::Cell`] tapes count toward the
/// equilibrium-layer activation memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeKind {
    /// One invocation of the equilibrium transformation.
    Cell,
    /// Anything else: input transform, heads, test graphs.
    Aux,
}

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn acquire(kind: TapeKind) {
    if kind == TapeKind::Cell {
        LIVE.with(|l| {
            let now = l.get() + 1;
            l.set(now);
            PEAK.with(|p| p.set(p.get().max(now)));
        });
    }
}

pub(crate) fn release(kind: TapeKind) {
    if kind == TapeKind::Cell {
        LIVE.with(|l| l.set(l.get().saturating_sub(1)));
    }
}

/// Number of cell tapes currently alive on this thread.
pub fn live_tapes() -> usize {
    LIVE.with(Cell::get)
}

/// Largest number of simultaneously alive cell tapes since the last reset.
pub fn peak_tapes() -> usize {
    PEAK.with(Cell::get)
}

pub fn reset_peak_tapes() {
    PEAK.with(|p| p.set(live_tapes()));
}
