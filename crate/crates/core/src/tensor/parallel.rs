use std::sync::atomic::{AtomicBool, Ordering};

// Below this many mul-adds a kernel stays on the calling thread.
pub(crate) const PARALLEL_MIN_WORK: usize = 1 << 16;

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Enables or disables data-parallel execution inside kernels.
///
/// Kernels only split work along independent output rows or windows, so
/// results are bitwise identical either way; this switch exists for timing
/// stability and for `--deterministic` runs.
pub fn set_enabled(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

pub fn enabled() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

pub(crate) fn worth_it(work: usize) -> bool {
    enabled() && work >= PARALLEL_MIN_WORK && rayon::current_num_threads() > 1
}
