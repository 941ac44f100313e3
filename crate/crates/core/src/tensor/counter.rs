//! Thread-local count of scalar multiplications executed by forward ops.
//!
//! Matrix products contribute `p·q·r` per batch item, elementwise products and
//! constant rescaling contribute one per output element. Backward passes are
//! not counted.

use std::cell::Cell;

thread_local! {
    static MULTIPLICATIONS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: usize) {
    MULTIPLICATIONS.with(|c| c.set(c.get() + n as u64));
}

pub fn reset() {
    MULTIPLICATIONS.with(|c| c.set(0));
}

pub fn multiplications() -> u64 {
    MULTIPLICATIONS.with(Cell::get)
}

/// Runs `f` and returns its result with the multiplications it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = multiplications();
    let out = f();
    (out, multiplications() - before)
}
