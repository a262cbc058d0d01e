//! Element-count accounting for temporary buffers.
//!
//! Kernels register every scratch buffer they allocate with [`AllocationLedger::charge`];
//! the returned guard releases the charge on drop. The ledger tracks the
//! live total, the per-phase peak of that total, and the largest single
//! buffer seen. Counts are in `f64` elements, not bytes, so they do not
//! depend on the allocator.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward = 0,
    Jets = 1,
    Update = 2,
}

#[derive(Debug, Default)]
pub struct AllocationLedger {
    live: Cell<usize>,
    peaks: [Cell<usize>; 3],
    max_single: Cell<usize>,
    phase: Cell<usize>,
    primal_layer_evals: Cell<u64>,
}

/// Releases its charge when dropped.
#[must_use]
pub struct Charge<'a> {
    ledger: &'a AllocationLedger,
    elems: usize,
}

impl Drop for Charge<'_> {
    fn drop(&mut self) {
        self.ledger.live.set(self.ledger.live.get() - self.elems);
    }
}

/// Snapshot of a ledger's peaks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerReport {
    pub forward: usize,
    pub jets: usize,
    pub update: usize,
    pub max_single: usize,
}

impl LedgerReport {
    pub fn peak(&self) -> usize {
        self.forward.max(self.jets).max(self.update)
    }
}

impl AllocationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_phase(&self, phase: Phase) {
        self.phase.set(phase as usize);
        let p = &self.peaks[phase as usize];
        p.set(p.get().max(self.live.get()));
    }

    pub fn charge(&self, elems: usize) -> Charge<'_> {
        let live = self.live.get() + elems;
        self.live.set(live);
        let p = &self.peaks[self.phase.get()];
        p.set(p.get().max(live));
        self.max_single.set(self.max_single.get().max(elems));
        Charge { ledger: self, elems }
    }

    pub(crate) fn count_primal_layer(&self) {
        self.primal_layer_evals.set(self.primal_layer_evals.get() + 1);
    }

    /// Layer-level primal evaluations since the last reset.
    pub fn primal_layer_evals(&self) -> u64 {
        self.primal_layer_evals.get()
    }

    pub fn live(&self) -> usize {
        self.live.get()
    }

    pub fn report(&self) -> LedgerReport {
        LedgerReport {
            forward: self.peaks[0].get(),
            jets: self.peaks[1].get(),
            update: self.peaks[2].get(),
            max_single: self.max_single.get(),
        }
    }

    /// Clears peaks and counters. Outstanding charges stay live.
    pub fn reset(&self) {
        for p in &self.peaks {
            p.set(self.live.get());
        }
        self.max_single.set(0);
        self.primal_layer_evals.set(0);
    }
}
