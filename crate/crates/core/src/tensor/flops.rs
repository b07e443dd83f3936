//! Thread-local forward FLOP accounting.
//!
//! Constants: matmul counts `2*m*k*p`, elementwise ops count 1 per element,
//! attention softmax counts 5 per score element.

use std::cell::Cell;

pub const SOFTMAX_PER_ELEMENT: u64 = 5;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn read() -> u64 {
    COUNTER.with(Cell::get)
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

/// Runs `f` and returns its result with the FLOPs it recorded on this thread.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let start = read();
    let out = f();
    (out, read().wrapping_sub(start))
}
