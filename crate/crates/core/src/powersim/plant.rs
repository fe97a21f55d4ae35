use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::components::{governor_update, load_bank_command, pv_output, reached};
use super::{
    BatteryInverter, DieselGenset, EventKind, FrequencyAnchor, GridEvent, GridScenario, LoadBank,
    PvPlant, SimConfig, SimError,
};
use crate::stagelink::registers::{cmd, meas, CommandImage, Measurements};

/// Island bus considered energized above this voltage.
const ENERGIZED_PU: f64 = 0.1;
/// PV inverters only inject on a healthy bus.
const PV_MIN_PU: f64 = 0.9;
/// Closing the main breaker outside these bounds is logged as unsafe.
const CLOSE_DF_HZ: f64 = 0.5;
const CLOSE_DTHETA_RAD: f64 = 0.35;
const CLOSE_DV_PU: f64 = 0.1;
const TRIM_LIMIT_HZ: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BreakerState {
    Open,
    Closed,
}

/// Unit currently holding frequency and taking the power balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anchor {
    MainGrid,
    Diesel,
    GridForming,
    /// Dead bus.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    pub t_s: f64,
    pub f_hz: f64,
    pub theta_island_rad: f64,
    pub theta_grid_rad: f64,
    pub v_pu: f64,
    pub f_grid_hz: f64,
    pub v_grid_pu: f64,
    pub p_load_kw: f64,
    pub p_bank_kw: f64,
    pub p_pv_kw: f64,
    pub p_diesel_kw: f64,
    pub p_mech_kw: f64,
    pub p_batt1_kw: f64,
    pub p_batt2_kw: f64,
    pub p_grid_kw: f64,
    pub p_loss_kw: f64,
    pub soc1: f64,
    pub soc2: f64,
    pub breaker_main: BreakerState,
    pub bank_mask: u32,
    pub pv_curtail_kw: f64,
    pub anchor: Anchor,
}

/// Generation minus consumption minus losses.
pub fn power_balance_residual(s: &GridState) -> f64 {
    let gen = s.p_diesel_kw + s.p_pv_kw + s.p_batt1_kw + s.p_batt2_kw + s.p_grid_kw;
    gen - s.p_load_kw - s.p_bank_kw - s.p_loss_kw
}

/// Wraps an angle to (-π, π].
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GridSupply {
    f_hz: f64,
    v_pu: f64,
}

/// Power values injected from an emulated power interface instead of the
/// in-simulation component model.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExternalPower {
    pub bank_kw: Option<f64>,
    pub batt2_kw: Option<f64>,
}

/// Complete plant state: component sub-states plus the solved [`GridState`]
/// for the current step. A `Plant` is a plain value; cloning it forks the run.
#[derive(Debug, Clone)]
pub struct Plant {
    cfg: SimConfig,
    step: u64,
    events: Vec<GridEvent>,
    next_event: usize,
    diesel: Option<DieselGenset>,
    pv: Option<PvPlant>,
    irradiance_wm2: f64,
    forming: Option<BatteryInverter>,
    following: Option<BatteryInverter>,
    bank: Option<LoadBank>,
    load_kw: f64,
    load_blocks: usize,
    energized_blocks: usize,
    grid: Option<GridSupply>,
    breaker_closed: bool,
    forming_energized: bool,
    forming_v_pu: f64,
    f_trim_hz: f64,
    loss_fraction: f64,
    registers: CommandImage,
    external: ExternalPower,
    f_dynamic_hz: f64,
    theta_island: f64,
    theta_grid: f64,
    state: GridState,
    notes: Vec<String>,
}

impl Plant {
    pub fn new(scenario: &GridScenario, cfg: &SimConfig) -> Result<Self, SimError> {
        cfg.validate().map_err(SimError::InvalidScenario)?;
        scenario.validate(cfg)?;

        let mut events = scenario.events.clone();
        events.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));

        let grid = scenario
            .main_grid
            .as_ref()
            .map(|g| GridSupply { f_hz: g.f_hz, v_pu: g.v_pu });
        let breaker_closed = scenario.main_grid.as_ref().is_some_and(|g| g.connected);
        let forming_energized = scenario.anchor == FrequencyAnchor::GridForming;
        let mut pv = scenario.pv.clone();
        if let Some(pv) = pv.as_mut() {
            if pv.curtail_setpoint_kw.is_none() {
                pv.curtail_setpoint_kw = Some(pv.p_rated_kw);
            }
        }

        let f0 = cfg.f_nominal_hz;
        let mut plant = Plant {
            cfg: cfg.clone(),
            step: 0,
            events,
            next_event: 0,
            diesel: scenario.diesel.clone(),
            irradiance_wm2: pv.as_ref().map_or(0.0, |p| p.irradiance_wm2),
            pv,
            forming: scenario.forming.clone(),
            following: scenario.following.clone(),
            bank: scenario.load_bank.clone(),
            load_kw: scenario.load.p_kw,
            load_blocks: scenario.load.blocks,
            energized_blocks: scenario.load.energized_blocks.unwrap_or(scenario.load.blocks),
            grid,
            breaker_closed,
            forming_energized,
            forming_v_pu: if forming_energized { 1.0 } else { 0.0 },
            f_trim_hz: 0.0,
            loss_fraction: scenario.loss_fraction,
            registers: CommandImage::default(),
            external: ExternalPower::default(),
            f_dynamic_hz: f0,
            theta_island: 0.0,
            theta_grid: 0.0,
            state: blank_state(f0),
            notes: Vec::new(),
        };
        if let Some(b) = plant.bank.as_mut() {
            b.pending.clear();
        }
        plant.apply_due_events();
        plant.solve();

        // Start in equilibrium: mechanical power matches the electrical load,
        // and an unspecified dispatch keeps that point at nominal frequency.
        let p_elec = plant.state.p_diesel_kw;
        if let Some(d) = plant.diesel.as_mut() {
            if d.p_dispatch_kw.is_none() {
                d.p_dispatch_kw = Some(p_elec);
            }
            d.p_mech_kw = p_elec.clamp(0.0, d.s_rated_kw);
        }
        plant.solve();
        plant.registers = plant.initial_registers();
        Ok(plant)
    }

    fn initial_registers(&self) -> CommandImage {
        let mut img = CommandImage::default();
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        img.set(cmd::BANK_MASK, self.bank.as_ref().map_or(0.0, |b| b.active_mask as f64));
        img.set(cmd::PV_CURTAIL, self.pv.as_ref().map_or(0.0, |p| p.ceiling_kw()));
        img.set(cmd::BATT2_SETPOINT, self.following.as_ref().map_or(0.0, |b| b.p_setpoint_kw));
        img.set(cmd::BREAKER, flag(self.breaker_closed));
        img.set(cmd::PROTECTION_GROUP, flag(!self.breaker_closed));
        img.set(cmd::VSI_ENERGIZE, flag(self.forming_energized));
        img.set(cmd::CSI_ENABLE, flag(self.following.as_ref().is_some_and(|b| b.enabled)));
        img.set(cmd::LOAD_PICKUP, self.energized_blocks as f64);
        img
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }
    pub fn step_index(&self) -> u64 {
        self.step
    }
    pub fn time(&self) -> f64 {
        self.cfg.time_at(self.step)
    }
    pub fn state(&self) -> &GridState {
        &self.state
    }
    pub fn command_registers(&self) -> CommandImage {
        self.registers
    }
    pub fn diesel(&self) -> Option<&DieselGenset> {
        self.diesel.as_ref()
    }
    pub fn load_bank(&self) -> Option<&LoadBank> {
        self.bank.as_ref()
    }
    pub fn following(&self) -> Option<&BatteryInverter> {
        self.following.as_ref()
    }
    pub fn irradiance_wm2(&self) -> f64 {
        self.irradiance_wm2
    }
    pub fn set_external_power(&mut self, ext: ExternalPower) {
        self.external = ext;
    }
    /// Notable plant-side events raised since the last call.
    pub fn take_notes(&mut self) -> Vec<String> {
        std::mem::take(&mut self.notes)
    }

    pub fn active_anchor(&self) -> Anchor {
        if self.breaker_closed && self.grid.is_some() {
            Anchor::MainGrid
        } else if self.diesel.is_some() {
            Anchor::Diesel
        } else if self.forming_energized && self.forming.is_some() {
            Anchor::GridForming
        } else {
            Anchor::None
        }
    }

    /// Setpoint the grid-following unit is currently asked to deliver, or 0
    /// while it cannot inject.
    pub fn following_setpoint_kw(&self) -> f64 {
        match &self.following {
            Some(b) if b.enabled && self.state.v_pu >= ENERGIZED_PU => b.following_output(),
            _ => 0.0,
        }
    }

    fn apply_due_events(&mut self) {
        let t = self.time();
        while self.next_event < self.events.len() && reached(t, self.events[self.next_event].t_s) {
            let ev = self.events[self.next_event].kind.clone();
            self.next_event += 1;
            match ev {
                EventKind::Irradiance { wm2 } => self.irradiance_wm2 = wm2,
                EventKind::LoadStep { p_kw } => self.load_kw = p_kw,
                EventKind::DieselTrip => {
                    if let Some(d) = self.diesel.as_mut() {
                        d.online = false;
                        d.p_mech_kw = 0.0;
                    }
                }
                EventKind::GridLoss => {
                    if let Some(g) = self.grid.as_mut() {
                        g.v_pu = 0.0;
                    }
                }
                EventKind::GridRecovery { v_pu } => {
                    if let Some(g) = self.grid.as_mut() {
                        g.v_pu = v_pu;
                    }
                }
                EventKind::GridFrequency { f_hz } => {
                    if let Some(g) = self.grid.as_mut() {
                        g.f_hz = f_hz;
                    }
                }
            }
        }
        if let Some(b) = self.bank.as_mut() {
            b.apply_due(t);
        }
    }

    /// Algebraic power solve for the current instant. The anchor takes the
    /// balance, so the residual is zero up to rounding.
    pub fn solve(&mut self) {
        let anchor = self.active_anchor();
        let f_n = self.cfg.f_nominal_hz;
        let (v_pu, energized) = match anchor {
            Anchor::MainGrid => {
                let v = self.grid.map_or(0.0, |g| g.v_pu);
                (v, v >= ENERGIZED_PU)
            }
            Anchor::Diesel => (1.0, true),
            Anchor::GridForming => (self.forming_v_pu, self.forming_v_pu >= ENERGIZED_PU),
            Anchor::None => (0.0, false),
        };
        if !energized {
            // undervoltage relays drop every feeder block
            self.energized_blocks = 0;
        }

        let p_load = if energized {
            self.load_kw * self.energized_blocks as f64 / self.load_blocks as f64
        } else {
            0.0
        };
        let p_bank = if energized {
            self.external
                .bank_kw
                .unwrap_or_else(|| self.bank.as_ref().map_or(0.0, |b| b.active_kw()))
        } else {
            0.0
        };
        let p_pv = match &self.pv {
            Some(pv) if energized && v_pu >= PV_MIN_PU => pv_output(pv, self.irradiance_wm2),
            _ => 0.0,
        };
        let p_batt2 = match &self.following {
            Some(b) if b.enabled && energized => {
                self.external.batt2_kw.unwrap_or_else(|| b.following_output())
            }
            _ => 0.0,
        };
        let p_loss = self.loss_fraction * (p_load + p_bank);
        let demand = p_load + p_bank + p_loss;

        let mut p_diesel = 0.0;
        let mut p_batt1 = 0.0;
        let mut p_grid = 0.0;
        let f_grid = self.grid.map_or(f_n, |g| g.f_hz);
        let v_grid = self.grid.map_or(0.0, |g| g.v_pu);
        let f_hz = match anchor {
            Anchor::MainGrid => {
                if energized {
                    p_grid = demand - p_pv - p_batt2;
                }
                f_grid
            }
            Anchor::Diesel => {
                p_diesel = demand - p_pv - p_batt2;
                self.f_dynamic_hz
            }
            Anchor::GridForming => {
                let forming = self.forming.as_ref().expect("anchor implies forming unit");
                p_batt1 = demand - p_pv - p_batt2;
                f_n + self.f_trim_hz - forming.droop_f_pu * f_n * p_batt1 / forming.p_rated_kw
            }
            Anchor::None => f_n,
        };

        self.state = GridState {
            t_s: self.time(),
            f_hz,
            theta_island_rad: self.theta_island,
            theta_grid_rad: self.theta_grid,
            v_pu,
            f_grid_hz: f_grid,
            v_grid_pu: v_grid,
            p_load_kw: p_load,
            p_bank_kw: p_bank,
            p_pv_kw: p_pv,
            p_diesel_kw: p_diesel,
            p_mech_kw: self.diesel.as_ref().map_or(0.0, |d| d.p_mech_kw),
            p_batt1_kw: p_batt1,
            p_batt2_kw: p_batt2,
            p_grid_kw: p_grid,
            p_loss_kw: p_loss,
            soc1: self.forming.as_ref().map_or(0.0, |b| b.soc_frac),
            soc2: self.following.as_ref().map_or(0.0, |b| b.soc_frac),
            breaker_main: if self.breaker_closed { BreakerState::Closed } else { BreakerState::Open },
            bank_mask: self.bank.as_ref().map_or(0, |b| b.active_mask),
            pv_curtail_kw: self.pv.as_ref().map_or(0.0, |p| p.ceiling_kw()),
            anchor,
        };
    }

    /// Integrates from the current step to the next one, then applies due
    /// scenario events and load-bank switches and re-solves.
    pub fn advance(&mut self) -> Result<(), SimError> {
        let dt = self.cfg.dt_s;
        let f_n = self.cfg.f_nominal_hz;
        let s = self.state.clone();

        if s.anchor == Anchor::GridForming {
            let forming = self.forming.as_ref().expect("anchor implies forming unit");
            if s.p_batt1_kw.abs() > forming.p_rated_kw * (1.0 + 1e-12) {
                return Err(SimError::FrequencyCollapse {
                    t_s: s.t_s,
                    f_hz: s.f_hz,
                    reason: format!(
                        "grid-forming unit overloaded ({:.3} kW > {:.3} kW)",
                        s.p_batt1_kw, forming.p_rated_kw
                    ),
                });
            }
            if !forming.can_deliver(s.p_batt1_kw) {
                return Err(SimError::FrequencyCollapse {
                    t_s: s.t_s,
                    f_hz: s.f_hz,
                    reason: "grid-forming unit reached its state-of-charge limit".into(),
                });
            }
        }

        if let Some(d) = self.diesel.as_ref() {
            let f_gov = if s.anchor == Anchor::Diesel { self.f_dynamic_hz } else { s.f_hz };
            if s.anchor == Anchor::Diesel {
                let accel = d.p_mech_kw - s.p_diesel_kw;
                self.f_dynamic_hz += dt * accel * f_n / (2.0 * d.h_s * d.s_rated_kw);
            }
            self.diesel = Some(governor_update(d, f_gov, f_n, dt));
        }

        if self.forming_energized && !self.breaker_closed && self.forming_v_pu < 1.0 {
            let ramp = self.forming.as_ref().map_or(1.0, |b| b.v_ramp_pu_per_s);
            self.forming_v_pu = (self.forming_v_pu + ramp * dt).min(1.0);
        }
        if let Some(b) = self.forming.as_mut() {
            b.integrate_soc(s.p_batt1_kw, dt);
        }
        if let Some(b) = self.following.as_mut() {
            b.integrate_soc(s.p_batt2_kw, dt);
        }

        self.theta_grid = wrap_angle(self.theta_grid + 2.0 * PI * s.f_grid_hz * dt);
        self.theta_island = if s.anchor == Anchor::MainGrid {
            self.theta_grid
        } else {
            wrap_angle(self.theta_island + 2.0 * PI * s.f_hz * dt)
        };

        self.step += 1;
        self.apply_due_events();
        self.solve();

        let f = self.state.f_hz;
        if self.state.anchor == Anchor::Diesel && !(f >= 0.5 * f_n && f <= 1.5 * f_n) {
            return Err(SimError::FrequencyCollapse {
                t_s: self.state.t_s,
                f_hz: f,
                reason: "island frequency left [0.5, 1.5] x nominal".into(),
            });
        }
        Ok(())
    }

    /// Runs one full step without any controller interaction.
    pub fn step_dynamics(&mut self) -> Result<&GridState, SimError> {
        self.advance()?;
        Ok(&self.state)
    }

    /// Measurement registers derived from the solved state.
    pub fn measure(&self) -> Measurements {
        let s = &self.state;
        let mut m = Measurements::default();
        let has_grid = self.grid.is_some();
        m.set(meas::F_HZ, s.f_hz);
        m.set(meas::V_PU, s.v_pu);
        m.set(meas::P_LOAD, s.p_load_kw);
        m.set(meas::P_PV, s.p_pv_kw);
        m.set(meas::P_DIESEL, s.p_diesel_kw);
        m.set(meas::P_BATT1, s.p_batt1_kw);
        m.set(meas::P_BATT2, s.p_batt2_kw);
        m.set(meas::SOC1, s.soc1);
        m.set(meas::SOC2, s.soc2);
        m.set(meas::BREAKER_MAIN, if self.breaker_closed { 1.0 } else { 0.0 });
        if has_grid {
            m.set(meas::DELTA_F, s.f_hz - s.f_grid_hz);
            m.set(meas::DELTA_V, s.v_pu - s.v_grid_pu);
            m.set(meas::DELTA_THETA, wrap_angle(s.theta_island_rad - s.theta_grid_rad));
        }
        if let Some(d) = &self.diesel {
            m.set(meas::DIESEL_RATIO, s.p_diesel_kw / d.s_rated_kw);
        }
        let vsi_ready = self.forming.as_ref().is_some_and(|b| b.soc_frac > 0.05);
        m.set(meas::VSI_AVAILABLE, if vsi_ready { 1.0 } else { 0.0 });
        m.set(meas::P_BANK, s.p_bank_kw);
        m
    }

    /// Applies one command-register write. Returns whether the register value
    /// changed; unchanged values have no physical effect. Non-command
    /// addresses are ignored.
    pub fn apply_command(&mut self, addr: u16, value: f64) -> bool {
        if !(crate::stagelink::registers::CMD_BASE..32).contains(&addr) {
            return false;
        }
        if self.registers.get(addr).to_bits() == value.to_bits() {
            return false;
        }
        self.registers.set(addr, value);
        let t = self.time();
        let on = value >= 0.5;
        match addr {
            cmd::BANK_MASK => {
                if let Some(b) = &self.bank {
                    let mask = if value.is_finite() && value >= 0.0 {
                        (value.round() as u64 & b.full_mask() as u64) as u32
                    } else {
                        b.active_mask
                    };
                    self.bank = Some(load_bank_command(b, mask, t));
                }
            }
            cmd::PV_CURTAIL => {
                if let Some(pv) = self.pv.as_mut() {
                    pv.set_curtailment(value);
                }
            }
            cmd::BATT2_SETPOINT => {
                if let Some(b) = self.following.as_mut() {
                    b.p_setpoint_kw = if value.is_finite() { value } else { 0.0 };
                }
            }
            cmd::BREAKER => self.operate_breaker(on),
            cmd::VSI_ENERGIZE => {
                if on {
                    if self.breaker_closed && self.grid.is_some() {
                        self.notes.push("energize_refused_breaker_closed".into());
                    } else if self.forming.is_some() && !self.forming_energized {
                        self.forming_energized = true;
                        self.forming_v_pu = 0.0;
                    }
                } else {
                    self.forming_energized = false;
                    self.forming_v_pu = 0.0;
                }
            }
            cmd::FORMING_F_TRIM => {
                self.f_trim_hz = if value.is_finite() {
                    value.clamp(-TRIM_LIMIT_HZ, TRIM_LIMIT_HZ)
                } else {
                    0.0
                };
            }
            cmd::CSI_ENABLE => {
                if let Some(b) = self.following.as_mut() {
                    b.enabled = on;
                }
            }
            cmd::LOAD_PICKUP if value.is_finite() => {
                self.energized_blocks = (value.round().max(0.0) as usize).min(self.load_blocks);
            }
            _ => {}
        }
        self.solve();
        true
    }

    fn operate_breaker(&mut self, close: bool) {
        if close == self.breaker_closed {
            return;
        }
        if !close {
            self.breaker_closed = false;
            self.theta_island = self.theta_grid;
            return;
        }
        let Some(g) = self.grid else {
            self.notes.push("close_refused_no_grid".into());
            return;
        };
        let s = &self.state;
        let live_island = s.v_pu >= ENERGIZED_PU;
        if live_island {
            let df = s.f_hz - g.f_hz;
            let dv = s.v_pu - g.v_pu;
            let dth = wrap_angle(self.theta_island - self.theta_grid);
            if df.abs() > CLOSE_DF_HZ || dv.abs() > CLOSE_DV_PU || dth.abs() > CLOSE_DTHETA_RAD {
                self.notes.push("out_of_sync_close".into());
            }
        }
        self.breaker_closed = true;
        self.f_trim_hz = 0.0;
        self.theta_island = self.theta_grid;
    }
}

fn blank_state(f0: f64) -> GridState {
    GridState {
        t_s: 0.0,
        f_hz: f0,
        theta_island_rad: 0.0,
        theta_grid_rad: 0.0,
        v_pu: 0.0,
        f_grid_hz: f0,
        v_grid_pu: 0.0,
        p_load_kw: 0.0,
        p_bank_kw: 0.0,
        p_pv_kw: 0.0,
        p_diesel_kw: 0.0,
        p_mech_kw: 0.0,
        p_batt1_kw: 0.0,
        p_batt2_kw: 0.0,
        p_grid_kw: 0.0,
        p_loss_kw: 0.0,
        soc1: 0.0,
        soc2: 0.0,
        breaker_main: BreakerState::Open,
        bank_mask: 0,
        pv_curtail_kw: 0.0,
        anchor: Anchor::None,
    }
}
