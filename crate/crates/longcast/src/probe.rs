//! Thread-local instrumentation counters.
//!
//! Attention kernels report every query-key dot product they evaluate and
//! the decoder reports each forward invocation. Counters are exact
//! integers, not estimates; readers reset them around the region they
//! want to measure. Keeping them thread-local means a report stays
//! coherent as long as it is produced on one thread.

use std::cell::{Cell, RefCell};

thread_local! {
    static DOT_PRODUCTS: Cell<u64> = const { Cell::new(0) };
    static DECODER_FORWARDS: Cell<u64> = const { Cell::new(0) };
    static CAPTURE_TOPU: Cell<bool> = const { Cell::new(false) };
    static TOPU_LOG: RefCell<Vec<Vec<usize>>> = const { RefCell::new(Vec::new()) };
}

pub fn reset() {
    DOT_PRODUCTS.with(|c| c.set(0));
    DECODER_FORWARDS.with(|c| c.set(0));
    TOPU_LOG.with(|l| l.borrow_mut().clear());
}

pub fn dot_products() -> u64 {
    DOT_PRODUCTS.with(|c| c.get())
}

pub fn decoder_forwards() -> u64 {
    DECODER_FORWARDS.with(|c| c.get())
}

pub(crate) fn add_dot_products(n: u64) {
    DOT_PRODUCTS.with(|c| c.set(c.get() + n));
}

pub(crate) fn add_decoder_forward() {
    DECODER_FORWARDS.with(|c| c.set(c.get() + 1));
}

/// Enable recording of the selected-query index set of every sparse
/// attention call until the next `reset`.
pub fn capture_top_u(enable: bool) {
    CAPTURE_TOPU.with(|c| c.set(enable));
}

pub fn top_u_log() -> Vec<Vec<usize>> {
    TOPU_LOG.with(|l| l.borrow().clone())
}

pub(crate) fn record_top_u(indices: &[usize]) {
    if CAPTURE_TOPU.with(|c| c.get()) {
        TOPU_LOG.with(|l| l.borrow_mut().push(indices.to_vec()));
    }
}
