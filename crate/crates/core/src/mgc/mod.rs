//! Reference microgrid controllers.
//!
//! Both controllers are pure functions of (measurements, own state) wrapped
//! in a [`Controller`](crate::stagelink::Controller) so the same code runs
//! at every stage.

mod blackstart;
mod offgrid;

pub use blackstart::{
    blackstart_step, protection_settings, resync_ready, Blackstart, BlackstartConfig, BlackstartNode,
    BlackstartState, EnergyManagement, OvercurrentSettings, ProtectionGroup, ProtectionTable,
    ResyncThresholds, StepResult, Transition,
};
pub use offgrid::{
    minimal_cover, offgrid_mgc_step, OffgridCommands, OffgridInputs, OffgridMgc, OffgridMgcConfig,
    OffgridMode, OffgridState,
};

use serde::{Deserialize, Serialize};

/// Controller hierarchy levels, from DER unit (D5) up to system operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    D1,
    D2,
    D3,
    D4,
    D5,
}

/// Communication interfaces between adjacent levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Interface {
    L1,
    L2,
    L3,
    L4,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlLevel {
    pub level: Level,
    pub interfaces_used: Vec<Interface>,
}

impl ControlLevel {
    /// Intelligent electronic device level, talking to DER controllers.
    pub fn d3() -> Self {
        ControlLevel { level: Level::D3, interfaces_used: vec![Interface::L3] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stagelink::Controller;

    #[test]
    fn both_controllers_are_d3() {
        let off = OffgridMgc::new(OffgridMgcConfig::fixture()).unwrap();
        let bs = Blackstart::new(BlackstartConfig::fixture()).unwrap();
        assert_eq!(off.level().level, Level::D3);
        assert_eq!(bs.level().level, Level::D3);
    }
}
