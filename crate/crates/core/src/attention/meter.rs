//! Live-scratch counter for attention kernels.
//!
//! Counts reals held in attention working buffers on the current thread
//! (score tiles, saved probabilities, online-softmax accumulators). Inputs and
//! outputs are not scratch. Each simulated rank runs on its own thread, so the
//! meter is per rank.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Zero the peak (and live) count for this thread.
pub fn reset() {
    LIVE.with(|l| l.set(0));
    PEAK.with(|p| p.set(0));
}

pub fn live() -> usize {
    LIVE.with(Cell::get)
}

/// Largest live count since the last [`reset`].
pub fn peak() -> usize {
    PEAK.with(Cell::get)
}

/// RAII registration of `n` scratch reals.
#[derive(Debug)]
pub struct Scratch {
    n: usize,
}

impl Scratch {
    pub fn new(n: usize) -> Self {
        LIVE.with(|l| {
            let now = l.get() + n;
            l.set(now);
            PEAK.with(|p| p.set(p.get().max(now)));
        });
        Self { n }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        LIVE.with(|l| l.set(l.get().saturating_sub(self.n)));
    }
}
