//! Fixed-step RMS model of an off-grid / microgrid plant.
//!
//! The network is a single bus. Whichever unit anchors the frequency (main
//! grid, diesel, or grid-forming inverter) takes the power balance as slack,
//! so the solved state conserves power exactly. A diesel anchor adds a
//! uniform-frequency swing equation with a droop governor; a grid-forming
//! inverter sets frequency algebraically from its droop.

mod components;
mod plant;

pub use components::{
    governor_update, load_bank_command, mask_power, pv_output, BatteryInverter, DieselGenset,
    InverterMode, LoadBank, PendingSwitch, PvPlant, MAX_BANK_STEPS,
};
pub use plant::{power_balance_residual, wrap_angle, Anchor, BreakerState, ExternalPower, GridState, Plant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("no frequency anchor: {0}")]
    NoFrequencyAnchor(String),
    #[error("frequency collapse at t = {t_s:.3} s (f = {f_hz:.3} Hz): {reason}")]
    FrequencyCollapse { t_s: f64, f_hz: f64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    #[serde(default = "default_control_period")]
    pub control_period_s: f64,
    pub duration_s: f64,
    #[serde(default = "default_f_nominal")]
    pub f_nominal_hz: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_dt() -> f64 {
    1e-3
}
fn default_control_period() -> f64 {
    0.1
}
fn default_f_nominal() -> f64 {
    50.0
}
fn default_seed() -> u64 {
    42
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt_s > 0.0) || !self.dt_s.is_finite() {
            return Err("SimConfig.dt_s must be > 0".into());
        }
        if !(self.control_period_s > 0.0) {
            return Err("SimConfig.control_period_s must be > 0".into());
        }
        let ratio = self.control_period_s / self.dt_s;
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-6 {
            return Err("SimConfig.control_period_s must be an integer multiple of dt_s".into());
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err("SimConfig.duration_s must be > 0".into());
        }
        if !(self.f_nominal_hz > 0.0) {
            return Err("SimConfig.f_nominal_hz must be > 0".into());
        }
        Ok(())
    }

    pub fn steps_per_period(&self) -> usize {
        (self.control_period_s / self.dt_s).round() as usize
    }

    pub fn total_steps(&self) -> usize {
        (self.duration_s / self.dt_s).round() as usize
    }

    /// Virtual time of step `n`. Computed from the index so it never drifts.
    pub fn time_at(&self, n: u64) -> f64 {
        n as f64 * self.dt_s
    }

    /// First step index whose time reaches `t_s`.
    pub fn step_reaching(&self, t_s: f64) -> u64 {
        let x = t_s / self.dt_s - 1e-6;
        if x <= 0.0 {
            0
        } else {
            x.ceil() as u64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadProfile {
    /// Aggregated non-controllable load at t = 0.
    pub p_kw: f64,
    /// Number of equal blocks the load is split into for restoration pickup.
    #[serde(default = "one")]
    pub blocks: usize,
    /// Blocks energized at t = 0; `None` means all.
    #[serde(default)]
    pub energized_blocks: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MainGrid {
    #[serde(default = "default_f_nominal")]
    pub f_hz: f64,
    #[serde(default = "one_pu")]
    pub v_pu: f64,
    /// Main breaker closed at t = 0.
    #[serde(default = "default_true")]
    pub connected: bool,
}

fn one_pu() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrequencyAnchor {
    Diesel,
    GridForming,
    MainGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EventKind {
    Irradiance { wm2: f64 },
    LoadStep { p_kw: f64 },
    DieselTrip,
    GridLoss,
    GridRecovery {
        #[serde(default = "one_pu")]
        v_pu: f64,
    },
    GridFrequency { f_hz: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEvent {
    pub t_s: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridScenario {
    pub anchor: FrequencyAnchor,
    #[serde(default)]
    pub diesel: Option<DieselGenset>,
    #[serde(default)]
    pub pv: Option<PvPlant>,
    /// Grid-forming (VSI) battery inverter.
    #[serde(default)]
    pub forming: Option<BatteryInverter>,
    /// Grid-following (CSI) battery inverter.
    #[serde(default)]
    pub following: Option<BatteryInverter>,
    #[serde(default)]
    pub load_bank: Option<LoadBank>,
    pub load: LoadProfile,
    #[serde(default)]
    pub main_grid: Option<MainGrid>,
    /// Lumped resistive losses as a fraction of consumption.
    #[serde(default)]
    pub loss_fraction: f64,
    #[serde(default)]
    pub events: Vec<GridEvent>,
}

impl GridScenario {
    pub fn component_count(&self) -> usize {
        [
            self.diesel.is_some(),
            self.pv.is_some(),
            self.forming.is_some(),
            self.following.is_some(),
            self.load_bank.is_some(),
            self.main_grid.is_some(),
        ]
        .iter()
        .filter(|x| **x)
        .count()
    }

    pub fn validate(&self, cfg: &SimConfig) -> Result<(), SimError> {
        let bad = SimError::InvalidScenario;
        if self.component_count() == 0 {
            return Err(bad("network has no components".into()));
        }
        if let Some(d) = &self.diesel {
            d.validate().map_err(bad)?;
        }
        if let Some(pv) = &self.pv {
            pv.validate().map_err(bad)?;
        }
        if let Some(b) = &self.forming {
            b.validate("forming").map_err(bad)?;
            if b.mode != InverterMode::GridForming {
                return Err(bad("forming.mode must be GridForming".into()));
            }
        }
        if let Some(b) = &self.following {
            b.validate("following").map_err(bad)?;
            if b.mode != InverterMode::GridFollowing {
                return Err(bad("following.mode must be GridFollowing".into()));
            }
        }
        if let Some(lb) = &self.load_bank {
            lb.validate().map_err(bad)?;
        }
        if !(self.load.p_kw >= 0.0) {
            return Err(bad("LoadProfile.p_kw must be >= 0".into()));
        }
        if self.load.blocks == 0 {
            return Err(bad("LoadProfile.blocks must be >= 1".into()));
        }
        if self.load.energized_blocks.is_some_and(|k| k > self.load.blocks) {
            return Err(bad("LoadProfile.energized_blocks exceeds blocks".into()));
        }
        if let Some(g) = &self.main_grid {
            if !(g.f_hz > 0.0) || !(g.v_pu >= 0.0) {
                return Err(bad("MainGrid.f_hz must be > 0 and v_pu >= 0".into()));
            }
        }
        if !(0.0..1.0).contains(&self.loss_fraction) {
            return Err(bad("GridScenario.loss_fraction must be in [0, 1)".into()));
        }
        for ev in &self.events {
            if !(ev.t_s >= 0.0 && ev.t_s <= cfg.duration_s) {
                return Err(bad(format!(
                    "event {:?} at t = {} s lies outside [0, duration_s]",
                    ev.kind, ev.t_s
                )));
            }
            match ev.kind {
                EventKind::Irradiance { wm2 } if !(wm2 >= 0.0) => {
                    return Err(bad("irradiance event values must be >= 0".into()))
                }
                EventKind::LoadStep { p_kw } if !(p_kw >= 0.0) => {
                    return Err(bad("load step values must be >= 0".into()))
                }
                EventKind::Irradiance { .. } if self.pv.is_none() => {
                    return Err(bad("irradiance event without a PV plant".into()))
                }
                EventKind::DieselTrip if self.diesel.is_none() => {
                    return Err(bad("diesel trip event without a diesel".into()))
                }
                EventKind::GridLoss | EventKind::GridRecovery { .. } | EventKind::GridFrequency { .. }
                    if self.main_grid.is_none() =>
                {
                    return Err(bad("main-grid event without a main grid".into()))
                }
                _ => {}
            }
        }
        match self.anchor {
            FrequencyAnchor::Diesel if self.diesel.is_none() => {
                Err(SimError::NoFrequencyAnchor("anchor Diesel but no diesel configured".into()))
            }
            FrequencyAnchor::GridForming if self.forming.is_none() => Err(SimError::NoFrequencyAnchor(
                "anchor GridForming but no grid-forming inverter configured".into(),
            )),
            FrequencyAnchor::MainGrid if !self.main_grid.as_ref().is_some_and(|g| g.connected) => {
                Err(SimError::NoFrequencyAnchor("anchor MainGrid but no connected main grid".into()))
            }
            FrequencyAnchor::GridForming | FrequencyAnchor::MainGrid if self.diesel.is_some() => {
                Err(bad("a diesel, when present, must be the frequency anchor".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Builds the plant at t = 0. Thin alias over [`Plant::new`].
pub fn init_grid(scenario: &GridScenario, cfg: &SimConfig) -> Result<Plant, SimError> {
    Plant::new(scenario, cfg)
}
