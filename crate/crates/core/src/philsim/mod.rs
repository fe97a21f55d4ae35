//! Emulated power-hardware-in-the-loop: amplifier, hardware under test,
//! interface coupling and a loop stability probe.

mod devices;
mod itm;
mod probe;
mod stage;

pub use devices::{amplifier_step, hut_step, Amplifier, AmplifierModel, HutEmulator, HutKind};
pub use itm::{gain_ratio, itm_couple, run_itm_loop, InterfaceSample, ItmMonitor, ItmRun, PhilCoupling};
pub use probe::{stability_probe, Verdict, VerdictKind, DEFAULT_TOL, MIN_WINDOW, SEGMENT_LEN};
pub use stage::{HutBinding, InterfaceRow, PhilStage, PhilStageConfig};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhilError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("HUT impedance is zero")]
    ZeroHutImpedance,
    #[error("probe window has {len} samples, needs at least {min}")]
    WindowTooShort { len: usize, min: usize },
}
