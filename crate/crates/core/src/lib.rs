//! Deterministic virtual-time testing chain for microgrid controllers.
//!
//! The same controller runs against the same simulated plant through four
//! coupling stages of increasing realism: direct call, message exchange over
//! an ideal channel, an impaired channel with analog I/O, and an emulated
//! power interface. Traces from each stage can be diffed.

// `!(x > 0.0)` is the idiom used throughout validation so NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chainrunner;
pub mod mgc;
pub mod philsim;
pub mod powersim;
pub mod stagelink;
