//! Thread-local multiply–add counter.
//!
//! Convolution and matrix-product kernels report their multiply–adds here.
//! Elementwise work, sampling, pooling and backward kernels are not counted.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn add(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// Total multiply–adds recorded on this thread so far.
pub fn current() -> u64 {
    MACS.with(|c| c.get())
}

/// Runs `f` and returns its result with the multiply–adds it performed on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let start = current();
    let out = f();
    (out, current() - start)
}
