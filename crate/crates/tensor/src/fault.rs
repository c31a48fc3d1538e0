//! Fault injection for the gradient-verification suite.
//!
//! Flipping a backward sign must make `gradcheck` fail; the CLI uses this
//! to prove the checker is not vacuous.

use std::sync::atomic::{AtomicBool, Ordering};

static FLIP_SOFTMAX_BACKWARD: AtomicBool = AtomicBool::new(false);

#[doc(hidden)]
pub fn set_softmax_backward_flipped(on: bool) {
    FLIP_SOFTMAX_BACKWARD.store(on, Ordering::SeqCst);
}

pub(crate) fn softmax_backward_flipped() -> bool {
    FLIP_SOFTMAX_BACKWARD.load(Ordering::Relaxed)
}
