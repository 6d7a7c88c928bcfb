//! Instrumented multiply-accumulate counter.
//!
//! `matmul` and `conv2d` add their own mul-add counts to a per-thread tally
//! whenever they run forward. Backward passes are not counted. The analyzer
//! uses this to cross-check its closed-form FLOP model against what actually
//! executes.

use std::cell::Cell;

thread_local! {
    static MAC_COUNT: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record(macs: u64) {
    MAC_COUNT.with(|c| c.set(c.get() + macs));
}

pub fn reset() {
    MAC_COUNT.with(|c| c.set(0));
}

pub fn read() -> u64 {
    MAC_COUNT.with(|c| c.get())
}

/// Runs `f` and returns its result with the number of mul-adds it executed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
