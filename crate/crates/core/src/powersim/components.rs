//! Plant components: diesel genset with droop governor, PV plant, battery
//! inverters and the switchable load bank.

use serde::{Deserialize, Serialize};

/// Slack of one microsecond when comparing virtual times against due times.
pub(crate) const TIME_EPS: f64 = 1e-9;

pub(crate) fn reached(t_now: f64, due: f64) -> bool {
    t_now + TIME_EPS >= due
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DieselGenset {
    pub s_rated_kw: f64,
    /// Inertia constant in seconds.
    pub h_s: f64,
    /// Per-unit frequency drop per per-unit power.
    pub droop_pu: f64,
    pub t_gov_s: f64,
    #[serde(default = "default_min_load_ratio")]
    pub min_load_ratio: f64,
    /// Governor load reference. `None` at load time means "start in
    /// equilibrium": the plant fills in the initial electrical power.
    #[serde(default)]
    pub p_dispatch_kw: Option<f64>,
    #[serde(default)]
    pub p_mech_kw: f64,
    #[serde(default = "yes")]
    pub online: bool,
}

fn default_min_load_ratio() -> f64 {
    0.30
}

fn yes() -> bool {
    true
}

impl DieselGenset {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.s_rated_kw > 0.0) {
            return Err("DieselGenset.s_rated_kw must be > 0".into());
        }
        if !(self.h_s > 0.0) {
            return Err("DieselGenset.h_s must be > 0".into());
        }
        if !(self.droop_pu > 0.0) {
            return Err("DieselGenset.droop_pu must be > 0".into());
        }
        if !(self.t_gov_s >= 0.0) {
            return Err("DieselGenset.t_gov_s must be >= 0".into());
        }
        if !(self.min_load_ratio > 0.0 && self.min_load_ratio < 1.0) {
            return Err("DieselGenset.min_load_ratio must be in (0, 1)".into());
        }
        if !(self.p_mech_kw >= 0.0 && self.p_mech_kw <= self.s_rated_kw) {
            return Err("DieselGenset.p_mech_kw must be in [0, s_rated_kw]".into());
        }
        Ok(())
    }

    /// Minimum allowed electrical loading in kW.
    pub fn min_load_kw(&self) -> f64 {
        self.min_load_ratio * self.s_rated_kw
    }

    /// Droop target before clamping.
    pub fn droop_reference(&self, f_hz: f64, f_nominal_hz: f64) -> f64 {
        let dispatch = self.p_dispatch_kw.unwrap_or(0.0);
        dispatch + self.s_rated_kw * (f_nominal_hz - f_hz) / (self.droop_pu * f_nominal_hz)
    }
}

/// One explicit step of the droop governor. A tripped unit has no
/// mechanical power.
pub fn governor_update(diesel: &DieselGenset, f_hz: f64, f_nominal_hz: f64, dt_s: f64) -> DieselGenset {
    let mut next = diesel.clone();
    if !diesel.online {
        next.p_mech_kw = 0.0;
        return next;
    }
    let target = diesel
        .droop_reference(f_hz, f_nominal_hz)
        .clamp(0.0, diesel.s_rated_kw);
    next.p_mech_kw = if diesel.t_gov_s <= 0.0 {
        target
    } else {
        let alpha = (dt_s / diesel.t_gov_s).min(1.0);
        diesel.p_mech_kw + alpha * (target - diesel.p_mech_kw)
    };
    next.p_mech_kw = next.p_mech_kw.clamp(0.0, diesel.s_rated_kw);
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvPlant {
    /// Rated output at 1000 W/m².
    pub p_rated_kw: f64,
    /// Irradiance at t = 0; later values come from scenario events.
    pub irradiance_wm2: f64,
    /// Active-power ceiling. `None` at load time means uncurtailed.
    #[serde(default)]
    pub curtail_setpoint_kw: Option<f64>,
}

impl PvPlant {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.p_rated_kw > 0.0) {
            return Err("PvPlant.p_rated_kw must be > 0".into());
        }
        if !(self.irradiance_wm2 >= 0.0) {
            return Err("PvPlant.irradiance_wm2 must be >= 0".into());
        }
        if let Some(c) = self.curtail_setpoint_kw {
            if !(0.0..=self.p_rated_kw).contains(&c) {
                return Err("PvPlant.curtail_setpoint_kw must be in [0, p_rated_kw]".into());
            }
        }
        Ok(())
    }

    pub fn ceiling_kw(&self) -> f64 {
        self.curtail_setpoint_kw.unwrap_or(self.p_rated_kw)
    }

    /// Sets the ceiling, clamped into `[0, p_rated_kw]`.
    pub fn set_curtailment(&mut self, kw: f64) {
        let kw = if kw.is_nan() { self.p_rated_kw } else { kw };
        self.curtail_setpoint_kw = Some(kw.clamp(0.0, self.p_rated_kw));
    }
}

/// PV output for the given irradiance, limited by the curtailment ceiling.
pub fn pv_output(plant: &PvPlant, irradiance_wm2: f64) -> f64 {
    let available = plant.p_rated_kw * irradiance_wm2.max(0.0) / 1000.0;
    available.min(plant.ceiling_kw()).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InverterMode {
    GridForming,
    GridFollowing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryInverter {
    pub mode: InverterMode,
    pub p_rated_kw: f64,
    pub soc_frac: f64,
    pub capacity_kwh: f64,
    /// Grid-following setpoint (discharge positive).
    #[serde(default)]
    pub p_setpoint_kw: f64,
    /// Frequency droop of the grid-forming unit, per unit.
    #[serde(default = "default_droop_f")]
    pub droop_f_pu: f64,
    #[serde(default)]
    pub droop_v_pu: f64,
    /// Voltage ramp while energizing a dead bus, pu/s.
    #[serde(default = "default_ramp")]
    pub v_ramp_pu_per_s: f64,
    /// Energized at t = 0. Grid-following units inject only while enabled.
    #[serde(default)]
    pub enabled: bool,
}

fn default_droop_f() -> f64 {
    0.01
}

fn default_ramp() -> f64 {
    0.5
}

impl BatteryInverter {
    pub fn validate(&self, name: &str) -> Result<(), String> {
        if !(self.p_rated_kw > 0.0) {
            return Err(format!("{name}.p_rated_kw must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.soc_frac) {
            return Err(format!("{name}.soc_frac must be in [0, 1]"));
        }
        if !(self.capacity_kwh > 0.0) {
            return Err(format!("{name}.capacity_kwh must be > 0"));
        }
        if self.mode == InverterMode::GridForming {
            if !(self.droop_f_pu > 0.0) {
                return Err(format!("{name}.droop_f_pu must be > 0"));
            }
            if !(self.v_ramp_pu_per_s > 0.0) {
                return Err(format!("{name}.v_ramp_pu_per_s must be > 0"));
            }
        }
        Ok(())
    }

    /// Whether the unit can deliver `p_kw` (discharge positive) given its SoC.
    pub fn can_deliver(&self, p_kw: f64) -> bool {
        !((p_kw > 0.0 && self.soc_frac <= 0.0) || (p_kw < 0.0 && self.soc_frac >= 1.0))
    }

    /// Output of a grid-following unit: setpoint clamped to rating, zeroed at
    /// SoC limits.
    pub fn following_output(&self) -> f64 {
        let p = self.p_setpoint_kw.clamp(-self.p_rated_kw, self.p_rated_kw);
        if self.can_deliver(p) {
            p
        } else {
            0.0
        }
    }

    pub fn integrate_soc(&mut self, p_kw: f64, dt_s: f64) {
        self.soc_frac = (self.soc_frac - p_kw * dt_s / 3600.0 / self.capacity_kwh).clamp(0.0, 1.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendingSwitch {
    pub step: usize,
    pub on: bool,
    pub due_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadBank {
    pub step_sizes_kw: Vec<f64>,
    pub switch_delay_s: f64,
    #[serde(default)]
    pub active_mask: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pending: Vec<PendingSwitch>,
}

pub const MAX_BANK_STEPS: usize = 24;

impl LoadBank {
    pub fn validate(&self) -> Result<(), String> {
        if self.step_sizes_kw.is_empty() || self.step_sizes_kw.len() > MAX_BANK_STEPS {
            return Err(format!("LoadBank.step_sizes_kw must hold 1..={MAX_BANK_STEPS} steps"));
        }
        if self.step_sizes_kw.iter().any(|s| !(*s > 0.0)) {
            return Err("LoadBank.step_sizes_kw must all be > 0".into());
        }
        if !(self.switch_delay_s >= 0.0) {
            return Err("LoadBank.switch_delay_s must be >= 0".into());
        }
        if self.active_mask >> self.step_sizes_kw.len() != 0 {
            return Err("LoadBank.active_mask has bits beyond the step list".into());
        }
        Ok(())
    }

    pub fn full_mask(&self) -> u32 {
        (1u32 << self.step_sizes_kw.len()) - 1
    }

    pub fn active_kw(&self) -> f64 {
        mask_power(&self.step_sizes_kw, self.active_mask)
    }

    /// State each step is heading to: physical state overridden by pending.
    pub fn intended_mask(&self) -> u32 {
        let mut mask = self.active_mask;
        for p in &self.pending {
            if p.on {
                mask |= 1 << p.step;
            } else {
                mask &= !(1 << p.step);
            }
        }
        mask
    }

    /// Applies pending switches that are due at `t_now`; returns whether the
    /// physical mask changed.
    pub fn apply_due(&mut self, t_now: f64) -> bool {
        let before = self.active_mask;
        let mut keep = Vec::with_capacity(self.pending.len());
        for p in self.pending.drain(..) {
            if reached(t_now, p.due_s) {
                if p.on {
                    self.active_mask |= 1 << p.step;
                } else {
                    self.active_mask &= !(1 << p.step);
                }
            } else {
                keep.push(p);
            }
        }
        self.pending = keep;
        before != self.active_mask
    }
}

/// Total power of the steps selected by `mask`, summed in index order.
pub fn mask_power(steps: &[f64], mask: u32) -> f64 {
    steps
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, s)| *s)
        .sum()
}

/// Queues switch commands for every step whose commanded state differs from
/// where it is already heading. A step has at most one pending entry; a newer
/// command supersedes the old one.
pub fn load_bank_command(bank: &LoadBank, mask: u32, t_now: f64) -> LoadBank {
    let mut next = bank.clone();
    let mask = mask & bank.full_mask();
    let due = t_now + bank.switch_delay_s;
    for step in 0..bank.step_sizes_kw.len() {
        let want = mask & (1 << step) != 0;
        let heading = next.intended_mask() & (1 << step) != 0;
        if want == heading {
            continue;
        }
        let physical = bank.active_mask & (1 << step) != 0;
        next.pending.retain(|p| p.step != step);
        if want != physical {
            next.pending.push(PendingSwitch { step, on: want, due_s: due });
        }
    }
    next.pending
        .sort_by(|a, b| a.due_s.total_cmp(&b.due_s).then(a.step.cmp(&b.step)));
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diesel() -> DieselGenset {
        DieselGenset {
            s_rated_kw: 100.0,
            h_s: 2.0,
            droop_pu: 0.05,
            t_gov_s: 0.5,
            min_load_ratio: 0.3,
            p_dispatch_kw: Some(0.0),
            p_mech_kw: 0.0,
            online: true,
        }
    }

    fn bank() -> LoadBank {
        LoadBank {
            step_sizes_kw: vec![5.0, 10.0, 20.0],
            switch_delay_s: 0.5,
            active_mask: 0,
            pending: vec![],
        }
    }

    #[test]
    fn droop_reference_at_nominal_is_dispatch() {
        let mut d = diesel();
        d.p_dispatch_kw = Some(42.0);
        assert_eq!(d.droop_reference(50.0, 50.0), 42.0);
    }

    #[test]
    fn droop_term_hand_evaluated() {
        // 100 * (0.25 / 50) / 0.05 = 10 kW
        let d = diesel();
        assert!((d.droop_reference(49.75, 50.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn governor_clamps_at_nameplate() {
        let mut d = diesel();
        d.p_dispatch_kw = Some(200.0);
        for _ in 0..20_000 {
            d = governor_update(&d, 50.0, 50.0, 1e-3);
        }
        assert!((d.p_mech_kw - 100.0).abs() < 1e-9);
    }

    #[test]
    fn tripped_diesel_has_no_mechanical_power() {
        let mut d = diesel();
        d.p_mech_kw = 50.0;
        d.online = false;
        assert_eq!(governor_update(&d, 49.0, 50.0, 1e-3).p_mech_kw, 0.0);
    }

    #[test]
    fn pv_examples() {
        let mut pv = PvPlant { p_rated_kw: 40.0, irradiance_wm2: 0.0, curtail_setpoint_kw: Some(40.0) };
        assert_eq!(pv_output(&pv, 0.0), 0.0);
        assert_eq!(pv_output(&pv, 1000.0), 40.0);
        pv.curtail_setpoint_kw = Some(25.0);
        assert_eq!(pv_output(&pv, 1000.0), 25.0);
        assert_eq!(pv_output(&pv, -5.0), 0.0);
    }

    #[test]
    fn identical_command_adds_nothing() {
        let b = bank();
        assert!(load_bank_command(&b, 0, 10.0).pending.is_empty());
        let mut on = bank();
        on.active_mask = 0b100;
        assert!(load_bank_command(&on, 0b100, 10.0).pending.is_empty());
    }

    #[test]
    fn recommand_before_due_is_superseded() {
        let b = load_bank_command(&bank(), 0b100, 10.0);
        assert_eq!(b.pending.len(), 1);
        let b = load_bank_command(&b, 0b100, 10.2);
        assert_eq!(b.pending.len(), 1);
        assert_eq!(b.pending[0].due_s, 10.5);
        // revoking before due cancels the entry
        let b = load_bank_command(&b, 0, 10.3);
        assert!(b.pending.is_empty());
        assert_eq!(b.active_mask, 0);
    }

    #[test]
    fn pending_applies_only_when_due() {
        let mut b = load_bank_command(&bank(), 0b001, 10.0);
        assert!(!b.apply_due(10.499));
        assert_eq!(b.active_mask, 0);
        assert!(b.apply_due(10.5));
        assert_eq!(b.active_mask, 1);
        assert_eq!(b.active_kw(), 5.0);
    }

    #[test]
    fn soc_clamps_and_limits() {
        let mut batt = BatteryInverter {
            mode: InverterMode::GridFollowing,
            p_rated_kw: 10.0,
            soc_frac: 0.0,
            capacity_kwh: 1.0,
            p_setpoint_kw: 20.0,
            droop_f_pu: 0.01,
            droop_v_pu: 0.0,
            v_ramp_pu_per_s: 0.5,
            enabled: true,
        };
        assert_eq!(batt.following_output(), 0.0);
        batt.p_setpoint_kw = -20.0;
        assert_eq!(batt.following_output(), -10.0);
        batt.integrate_soc(-10.0, 3600.0);
        assert_eq!(batt.soc_frac, 1.0);
    }
}
