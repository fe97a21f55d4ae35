//! Scenario files: schema, loading and cross-component validation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ChainError;
use crate::mgc::{Blackstart, BlackstartConfig, OffgridMgc, OffgridMgcConfig, OffgridMode};
use crate::philsim::{HutBinding, PhilStageConfig};
use crate::powersim::{GridScenario, SimConfig};
use crate::stagelink::{Controller, LinkSettings, StageKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControllerSpec {
    OffgridMgc(OffgridMgcConfig),
    Blackstart(BlackstartConfig),
}

impl ControllerSpec {
    pub fn build(&self) -> Result<Box<dyn Controller>, String> {
        Ok(match self {
            ControllerSpec::OffgridMgc(c) => Box::new(OffgridMgc::new(c.clone())?),
            ControllerSpec::Blackstart(c) => Box::new(Blackstart::new(c.clone())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage4Block {
    #[serde(default)]
    pub link: LinkSettings,
    pub phil: PhilStageConfig,
}

/// Per-stage settings. Stages 1 and 2 always run over an ideal exchange and
/// take no block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBlocks {
    #[serde(default)]
    pub stage3: Option<LinkSettings>,
    #[serde(default)]
    pub stage4: Option<Stage4Block>,
}

fn default_settling() -> f64 {
    2.0
}
fn default_ratio_tol() -> f64 {
    1e-6
}
fn default_pairs() -> BTreeMap<String, f64> {
    BTreeMap::from([("1-2".to_string(), 0.0), ("3-4".to_string(), 0.005)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Time excluded from steady-state checks after t = 0 and after each
    /// scripted grid event.
    #[serde(default = "default_settling")]
    pub settling_s: f64,
    /// Slack on the diesel minimum-load check, kW.
    #[serde(default = "default_ratio_tol")]
    pub ratio_tol_kw: f64,
    /// Largest relative RMS deviation of any power signal, per stage pair
    /// written "a-b".
    #[serde(default = "default_pairs")]
    pub power_rms_rel: BTreeMap<String, f64>,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            settling_s: default_settling(),
            ratio_tol_kw: default_ratio_tol(),
            power_rms_rel: default_pairs(),
        }
    }
}

impl Tolerances {
    /// Parsed pair tolerances, as (reference stage, other stage, limit).
    pub fn pairs(&self) -> Result<Vec<(u8, u8, f64)>, String> {
        let mut out = Vec::new();
        for (key, lim) in &self.power_rms_rel {
            let parsed = key
                .split_once('-')
                .and_then(|(a, b)| Some((a.trim().parse::<u8>().ok()?, b.trim().parse::<u8>().ok()?)));
            match parsed {
                Some((a, b))
                    if a != b && StageKind::from_number(a).is_some() && StageKind::from_number(b).is_some() =>
                {
                    if !(*lim >= 0.0) {
                        return Err(format!("Tolerances.power_rms_rel[{key}] must be >= 0"));
                    }
                    out.push((a.min(b), a.max(b), *lim));
                }
                _ => return Err(format!("Tolerances.power_rms_rel key {key:?} is not a stage pair like \"3-4\"")),
            }
        }
        Ok(out)
    }
}

/// Properties checked after each run of a listed stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    /// Diesel loading stays at or above its minimum at every control
    /// boundary outside the settling windows.
    #[serde(default)]
    pub min_load_held: Vec<u8>,
    /// The blackstart sequence returns to grid-connected before the end.
    #[serde(default)]
    pub blackstart_completes: Vec<u8>,
    /// The run reaches its full duration.
    #[serde(default)]
    pub no_abort: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub sim: SimConfig,
    pub grid: GridScenario,
    pub controller: ControllerSpec,
    #[serde(default)]
    pub stages: StageBlocks,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub expectations: Expectations,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ChainError> {
        let sc: Scenario = serde_json::from_str(text).map_err(|e| ChainError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        sc.validate()?;
        Ok(sc)
    }

    /// Pretty JSON with every default filled in.
    pub fn normalized_dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        let bad = ChainError::Validation;
        self.sim.validate().map_err(bad)?;
        self.grid.validate(&self.sim).map_err(|e| ChainError::Validation(e.to_string()))?;
        match &self.controller {
            ControllerSpec::OffgridMgc(c) => {
                c.validate().map_err(bad)?;
                let d = self
                    .grid
                    .diesel
                    .as_ref()
                    .ok_or_else(|| bad("OffgridMgc needs a diesel genset in the grid".into()))?;
                if c.s_rated_kw != d.s_rated_kw || c.min_load_ratio != d.min_load_ratio {
                    return Err(bad(
                        "OffgridMgcConfig.s_rated_kw and min_load_ratio must match the diesel genset".into(),
                    ));
                }
                if c.mode == OffgridMode::LoadBanks {
                    let plant_steps = self.grid.load_bank.as_ref().map(|b| &b.step_sizes_kw);
                    if plant_steps != Some(&c.bank_steps_kw) {
                        return Err(bad(
                            "OffgridMgcConfig.bank_steps_kw must equal the plant's LoadBank.step_sizes_kw".into(),
                        ));
                    }
                }
                if c.mode == OffgridMode::PvCurtailment {
                    let rated = self.grid.pv.as_ref().map(|p| p.p_rated_kw);
                    if rated != Some(c.pv_rated_kw) {
                        return Err(bad("OffgridMgcConfig.pv_rated_kw must equal the plant's PV rating".into()));
                    }
                }
            }
            ControllerSpec::Blackstart(c) => {
                c.validate().map_err(bad)?;
                if self.grid.main_grid.is_none() || self.grid.forming.is_none() {
                    return Err(bad("Blackstart needs a main grid and a grid-forming unit".into()));
                }
                if c.load_blocks as usize != self.grid.load.blocks {
                    return Err(bad("BlackstartConfig.load_blocks must equal LoadProfile.blocks".into()));
                }
                if Some(c.forming_p_rated_kw) != self.grid.forming.as_ref().map(|b| b.p_rated_kw)
                    || Some(c.forming_droop_f_pu) != self.grid.forming.as_ref().map(|b| b.droop_f_pu)
                {
                    return Err(bad("BlackstartConfig forming rating and droop must match the plant".into()));
                }
                let csi = self.grid.following.as_ref().map_or(0.0, |b| b.p_rated_kw);
                if c.csi_p_rated_kw != csi {
                    return Err(bad("BlackstartConfig.csi_p_rated_kw must match the grid-following unit".into()));
                }
                if c.f_nominal_hz != self.sim.f_nominal_hz {
                    return Err(bad("BlackstartConfig.f_nominal_hz must equal SimConfig.f_nominal_hz".into()));
                }
            }
        }
        if let Some(l) = &self.stages.stage3 {
            l.validate().map_err(|e| bad(format!("stages.stage3: {e}")))?;
        }
        if let Some(b) = &self.stages.stage4 {
            b.link.validate().map_err(|e| bad(format!("stages.stage4.link: {e}")))?;
            b.phil.validate(self.sim.dt_s).map_err(|e| bad(format!("stages.stage4.phil: {e}")))?;
            match b.phil.hut {
                HutBinding::LoadBank if self.grid.load_bank.is_none() => {
                    return Err(bad("stages.stage4.phil binds LoadBank but the grid has none".into()))
                }
                HutBinding::Batt2 { .. } if self.grid.following.is_none() => {
                    return Err(bad("stages.stage4.phil binds Batt2 but the grid has no grid-following unit".into()))
                }
                _ => {}
            }
        }
        if !(self.tolerances.settling_s >= 0.0) || !(self.tolerances.ratio_tol_kw >= 0.0) {
            return Err(bad("Tolerances.settling_s and ratio_tol_kw must be >= 0".into()));
        }
        self.tolerances.pairs().map_err(bad)?;
        let ex = &self.expectations;
        for s in ex.min_load_held.iter().chain(&ex.blackstart_completes).chain(&ex.no_abort) {
            if StageKind::from_number(*s).is_none() {
                return Err(bad(format!("Expectations name stage {s}, which does not exist")));
            }
        }
        Ok(())
    }

    pub fn has_stage(&self, stage: StageKind) -> bool {
        match stage {
            StageKind::Stage1Pure | StageKind::Stage2Sil => true,
            StageKind::Stage3Chil => self.stages.stage3.is_some(),
            StageKind::Stage4Psil => self.stages.stage4.is_some(),
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ChainError> {
    let text = std::fs::read_to_string(path).map_err(|e| ChainError::Io(format!("{}: {e}", path.display())))?;
    Scenario::from_json(&text)
}
