//! Process-wide call counters for the expensive inference entry points.
//!
//! Training of message estimators must never reach exact enumeration or
//! potential-based BP; the counters make that observable.

use std::sync::atomic::{AtomicU64, Ordering};

static EXACT_INFERENCE_CALLS: AtomicU64 = AtomicU64::new(0);
static POTENTIAL_BP_CALLS: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferenceCounts {
    pub exact_inference: u64,
    pub potential_bp: u64,
}

impl InferenceCounts {
    pub fn since(self, earlier: InferenceCounts) -> InferenceCounts {
        InferenceCounts {
            exact_inference: self.exact_inference - earlier.exact_inference,
            potential_bp: self.potential_bp - earlier.potential_bp,
        }
    }
}

pub fn snapshot() -> InferenceCounts {
    InferenceCounts {
        exact_inference: EXACT_INFERENCE_CALLS.load(Ordering::SeqCst),
        potential_bp: POTENTIAL_BP_CALLS.load(Ordering::SeqCst),
    }
}

pub(crate) fn record_exact_inference() {
    EXACT_INFERENCE_CALLS.fetch_add(1, Ordering::SeqCst);
}

pub(crate) fn record_potential_bp() {
    POTENTIAL_BP_CALLS.fetch_add(1, Ordering::SeqCst);
}
