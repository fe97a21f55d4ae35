//! Blackstart-capable MGC: blackout detection, restoration with a
//! grid-forming unit, islanded energy management, adaptive protection and
//! resynchronization.

use serde::{Deserialize, Serialize};

use super::ControlLevel;
use crate::powersim::wrap_angle;
use crate::stagelink::registers::{cmd, meas, CommandImage, Measurements};
use crate::stagelink::{ControlOutput, Controller};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlackstartNode {
    GridConnected,
    Blackout,
    RestoringForming,
    RestoringConnecting,
    Islanded,
    SyncPending,
    Synchronizing,
}

impl BlackstartNode {
    /// Code echoed in the acknowledgement register.
    pub fn code(self) -> u8 {
        match self {
            Self::GridConnected => 0,
            Self::Blackout => 1,
            Self::RestoringForming => 2,
            Self::RestoringConnecting => 3,
            Self::Islanded => 4,
            Self::SyncPending => 5,
            Self::Synchronizing => 6,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Self::GridConnected,
            1 => Self::Blackout,
            2 => Self::RestoringForming,
            3 => Self::RestoringConnecting,
            4 => Self::Islanded,
            5 => Self::SyncPending,
            6 => Self::Synchronizing,
            _ => return None,
        })
    }

    /// The edges of the restoration graph.
    pub fn successors(self) -> &'static [BlackstartNode] {
        use BlackstartNode::*;
        match self {
            GridConnected => &[Blackout],
            Blackout => &[RestoringForming],
            RestoringForming => &[RestoringConnecting],
            RestoringConnecting => &[Islanded],
            Islanded => &[SyncPending],
            SyncPending => &[Synchronizing],
            Synchronizing => &[GridConnected],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProtectionGroup {
    GridConnectedSet,
    IslandedSet,
}

impl ProtectionGroup {
    pub fn register_value(self) -> f64 {
        match self {
            Self::GridConnectedSet => 0.0,
            Self::IslandedSet => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OvercurrentSettings {
    pub pickup_a: f64,
    pub delay_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtectionTable {
    pub grid_connected: OvercurrentSettings,
    pub islanded: OvercurrentSettings,
}

impl Default for ProtectionTable {
    fn default() -> Self {
        ProtectionTable {
            grid_connected: OvercurrentSettings { pickup_a: 400.0, delay_s: 0.5 },
            islanded: OvercurrentSettings { pickup_a: 120.0, delay_s: 0.2 },
        }
    }
}

impl ProtectionTable {
    pub fn validate(&self) -> Result<(), String> {
        for s in [self.grid_connected, self.islanded] {
            if !(s.pickup_a > 0.0) || !(s.delay_s >= 0.0) {
                return Err("ProtectionTable pickups must be > 0 and delays >= 0".into());
            }
        }
        if !(self.islanded.pickup_a < self.grid_connected.pickup_a) {
            return Err("ProtectionTable.islanded.pickup_a must be below the grid-connected pickup".into());
        }
        Ok(())
    }
}

pub fn protection_settings(table: &ProtectionTable, group: ProtectionGroup) -> OvercurrentSettings {
    match group {
        ProtectionGroup::GridConnectedSet => table.grid_connected,
        ProtectionGroup::IslandedSet => table.islanded,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResyncThresholds {
    pub df_max_hz: f64,
    pub dv_max_pu: f64,
    pub dtheta_max_rad: f64,
    pub hold_cycles: u32,
}

impl Default for ResyncThresholds {
    fn default() -> Self {
        ResyncThresholds { df_max_hz: 0.1, dv_max_pu: 0.05, dtheta_max_rad: 0.1, hold_cycles: 5 }
    }
}

impl ResyncThresholds {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.df_max_hz > 0.0 && self.dv_max_pu > 0.0 && self.dtheta_max_rad > 0.0) {
            return Err("ResyncThresholds bounds must be > 0".into());
        }
        if self.hold_cycles == 0 {
            return Err("ResyncThresholds.hold_cycles must be >= 1".into());
        }
        Ok(())
    }
}

/// Inclusive synchronism check; the angle is wrapped to (-π, π] first.
pub fn resync_ready(df_hz: f64, dv_pu: f64, dtheta_rad: f64, th: &ResyncThresholds) -> bool {
    df_hz.abs() <= th.df_max_hz
        && dv_pu.abs() <= th.dv_max_pu
        && wrap_angle(dtheta_rad).abs() <= th.dtheta_max_rad
}

/// Islanded energy management: steer the forming unit's SoC into a band by
/// shifting power to the grid-following unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyManagement {
    pub soc_low: f64,
    pub soc_high: f64,
    /// Forming-unit power asked for while outside the band.
    pub steer_kw: f64,
    /// Largest frequency offset the forming unit's droop may take on for
    /// SoC steering; containment takes priority.
    pub f_containment_hz: f64,
}

impl Default for EnergyManagement {
    fn default() -> Self {
        EnergyManagement { soc_low: 0.4, soc_high: 0.8, steer_kw: 10.0, f_containment_hz: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlackstartConfig {
    #[serde(default = "default_f_nominal")]
    pub f_nominal_hz: f64,
    /// Bus considered dead below this voltage.
    #[serde(default = "default_v_dead")]
    pub v_dead_pu: f64,
    /// Bus considered healthy at or above this voltage.
    #[serde(default = "default_v_live")]
    pub v_live_pu: f64,
    #[serde(default = "three")]
    pub detection_cycles: u32,
    #[serde(default = "three")]
    pub energize_hold_cycles: u32,
    #[serde(default = "default_pickup_band")]
    pub pickup_f_band_hz: f64,
    pub load_blocks: u32,
    pub forming_p_rated_kw: f64,
    pub forming_droop_f_pu: f64,
    pub csi_p_rated_kw: f64,
    #[serde(default)]
    pub energy: EnergyManagement,
    /// Trim change per cycle per Hz of frequency mismatch.
    #[serde(default = "default_sync_gain")]
    pub sync_gain: f64,
    /// Hz of equivalent frequency error per radian of phase mismatch.
    #[serde(default = "default_sync_theta_gain")]
    pub sync_theta_gain_hz_per_rad: f64,
    #[serde(default = "default_trim_limit")]
    pub trim_limit_hz: f64,
    #[serde(default)]
    pub resync: ResyncThresholds,
    #[serde(default)]
    pub protection: ProtectionTable,
}

fn default_f_nominal() -> f64 {
    50.0
}
fn default_v_dead() -> f64 {
    0.1
}
fn default_v_live() -> f64 {
    0.9
}
fn three() -> u32 {
    3
}
fn default_pickup_band() -> f64 {
    0.5
}
fn default_sync_gain() -> f64 {
    0.5
}
fn default_sync_theta_gain() -> f64 {
    0.2
}
fn default_trim_limit() -> f64 {
    1.0
}

impl BlackstartConfig {
    /// 60 kW forming unit, 40 kW following unit, four load blocks.
    pub fn fixture() -> Self {
        BlackstartConfig {
            f_nominal_hz: 50.0,
            v_dead_pu: 0.1,
            v_live_pu: 0.9,
            detection_cycles: 3,
            energize_hold_cycles: 3,
            pickup_f_band_hz: 0.5,
            load_blocks: 4,
            forming_p_rated_kw: 60.0,
            forming_droop_f_pu: 0.01,
            csi_p_rated_kw: 40.0,
            energy: EnergyManagement::default(),
            sync_gain: 0.5,
            sync_theta_gain_hz_per_rad: 0.2,
            trim_limit_hz: 1.0,
            resync: ResyncThresholds::default(),
            protection: ProtectionTable::default(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.f_nominal_hz > 0.0) {
            return Err("BlackstartConfig.f_nominal_hz must be > 0".into());
        }
        if !(self.v_dead_pu > 0.0 && self.v_dead_pu < self.v_live_pu) {
            return Err("BlackstartConfig requires 0 < v_dead_pu < v_live_pu".into());
        }
        if self.detection_cycles == 0 || self.energize_hold_cycles == 0 {
            return Err("BlackstartConfig cycle counts must be >= 1".into());
        }
        if self.load_blocks == 0 {
            return Err("BlackstartConfig.load_blocks must be >= 1".into());
        }
        if !(self.forming_p_rated_kw > 0.0 && self.forming_droop_f_pu > 0.0 && self.csi_p_rated_kw > 0.0) {
            return Err("BlackstartConfig unit ratings and droop must be > 0".into());
        }
        let e = &self.energy;
        if !(0.0 <= e.soc_low && e.soc_low < e.soc_high && e.soc_high <= 1.0) {
            return Err("EnergyManagement requires 0 <= soc_low < soc_high <= 1".into());
        }
        if !(e.steer_kw >= 0.0 && e.f_containment_hz >= 0.0) {
            return Err("EnergyManagement.steer_kw and f_containment_hz must be >= 0".into());
        }
        if !(self.sync_gain > 0.0 && self.sync_theta_gain_hz_per_rad >= 0.0 && self.trim_limit_hz > 0.0) {
            return Err("BlackstartConfig synchronizer gains and trim limit must be positive".into());
        }
        self.resync.validate()?;
        self.protection.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlackstartState {
    pub node: BlackstartNode,
    /// Consecutive cycles the current node's guard has held.
    pub timer: u32,
    pub picked_blocks: u32,
    pub protection_group: ProtectionGroup,
    pub trim_hz: f64,
}

impl Default for BlackstartState {
    fn default() -> Self {
        BlackstartState {
            node: BlackstartNode::GridConnected,
            timer: 0,
            picked_blocks: 0,
            protection_group: ProtectionGroup::GridConnectedSet,
            trim_hz: 0.0,
        }
    }
}

/// Node change taken in a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub from: BlackstartNode,
    pub to: BlackstartNode,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepResult {
    pub commands: Vec<(u16, f64)>,
    pub transition: Option<Transition>,
    pub events: Vec<String>,
}

/// One supervisory cycle of the restoration state machine.
pub fn blackstart_step(
    state: &BlackstartState,
    m: &Measurements,
    cfg: &BlackstartConfig,
) -> (BlackstartState, StepResult) {
    use BlackstartNode::*;
    let mut s = *state;
    let mut r = StepResult::default();
    let v = m.v_pu();
    let f_err = m.f_hz() - cfg.f_nominal_hz;
    let goto = |s: &mut BlackstartState, r: &mut StepResult, to: BlackstartNode| {
        r.transition = Some(Transition { from: s.node, to });
        s.node = to;
        s.timer = 0;
    };

    match state.node {
        GridConnected => {
            s.timer = if v < cfg.v_dead_pu { s.timer + 1 } else { 0 };
            if s.timer >= cfg.detection_cycles {
                goto(&mut s, &mut r, Blackout);
                s.protection_group = ProtectionGroup::IslandedSet;
                r.commands.push((cmd::BREAKER, 0.0));
                r.commands.push((cmd::PROTECTION_GROUP, s.protection_group.register_value()));
            }
        }
        Blackout => {
            let vsi = m.get(meas::VSI_AVAILABLE) >= 0.5;
            if vsi && !m.breaker_closed() {
                goto(&mut s, &mut r, RestoringForming);
                s.trim_hz = 0.0;
                r.commands.push((cmd::VSI_ENERGIZE, 1.0));
                r.commands.push((cmd::FORMING_F_TRIM, 0.0));
            } else if !vsi {
                r.events.push("vsi_unavailable".into());
            } else {
                r.events.push("breaker_still_closed".into());
            }
        }
        RestoringForming => {
            s.timer = if v >= cfg.v_live_pu { s.timer + 1 } else { 0 };
            if s.timer >= cfg.energize_hold_cycles {
                goto(&mut s, &mut r, RestoringConnecting);
                s.picked_blocks = 0;
                r.commands.push((cmd::CSI_ENABLE, 1.0));
                r.commands.push((cmd::BATT2_SETPOINT, 0.0));
            }
        }
        RestoringConnecting => {
            if s.picked_blocks >= cfg.load_blocks {
                goto(&mut s, &mut r, Islanded);
            } else if f_err.abs() <= cfg.pickup_f_band_hz && v >= cfg.v_live_pu {
                s.picked_blocks += 1;
                r.commands.push((cmd::LOAD_PICKUP, s.picked_blocks as f64));
            }
        }
        Islanded | SyncPending | Synchronizing => {
            r.commands.push((cmd::BATT2_SETPOINT, csi_setpoint(m, cfg)));
            match state.node {
                Islanded => {
                    if m.grid_v_pu() >= cfg.v_live_pu {
                        goto(&mut s, &mut r, SyncPending);
                    }
                }
                SyncPending => goto(&mut s, &mut r, Synchronizing),
                _ => {
                    let df = m.get(meas::DELTA_F);
                    let dv = m.get(meas::DELTA_V);
                    let dth = m.get(meas::DELTA_THETA);
                    s.timer = if resync_ready(df, dv, dth, &cfg.resync) { s.timer + 1 } else { 0 };
                    if s.timer >= cfg.resync.hold_cycles {
                        goto(&mut s, &mut r, GridConnected);
                        s.protection_group = ProtectionGroup::GridConnectedSet;
                        s.trim_hz = 0.0;
                        r.commands.push((cmd::BREAKER, 1.0));
                        r.commands.push((cmd::PROTECTION_GROUP, s.protection_group.register_value()));
                        r.commands.push((cmd::FORMING_F_TRIM, 0.0));
                    } else {
                        let err = df + cfg.sync_theta_gain_hz_per_rad * wrap_angle(dth);
                        s.trim_hz = (s.trim_hz - cfg.sync_gain * err)
                            .clamp(-cfg.trim_limit_hz, cfg.trim_limit_hz);
                        r.commands.push((cmd::FORMING_F_TRIM, s.trim_hz));
                    }
                }
            }
        }
    }
    (s, r)
}

/// Grid-following setpoint that leaves the forming unit at its desired
/// power. Frequency containment caps how far SoC steering may push it.
fn csi_setpoint(m: &Measurements, cfg: &BlackstartConfig) -> f64 {
    let e = &cfg.energy;
    let soc = m.get(meas::SOC1);
    let mut p1_des = if soc < e.soc_low {
        -e.steer_kw
    } else if soc > e.soc_high {
        e.steer_kw
    } else {
        0.0
    };
    let cap = e.f_containment_hz * cfg.forming_p_rated_kw / (cfg.forming_droop_f_pu * cfg.f_nominal_hz);
    p1_des = p1_des.clamp(-cap, cap);
    let p1 = m.get(meas::P_BATT1);
    let p2 = m.get(meas::P_BATT2);
    (p1 + p2 - p1_des).clamp(-cfg.csi_p_rated_kw, cfg.csi_p_rated_kw)
}

/// Blackstart MGC hosted behind the controller interface.
#[derive(Debug, Clone)]
pub struct Blackstart {
    cfg: BlackstartConfig,
    state: BlackstartState,
    image: CommandImage,
}

impl Blackstart {
    pub fn new(cfg: BlackstartConfig) -> Result<Self, String> {
        cfg.validate()?;
        Ok(Blackstart { cfg, state: BlackstartState::default(), image: CommandImage::default() })
    }

    pub fn state(&self) -> &BlackstartState {
        &self.state
    }
}

impl Controller for Blackstart {
    fn level(&self) -> ControlLevel {
        ControlLevel::d3()
    }

    fn init(&mut self, registers: &CommandImage) {
        self.image = *registers;
        self.image.set(cmd::BLACKSTART_ACK, self.state.node.code() as f64);
    }

    fn step(&mut self, m: &Measurements) -> ControlOutput {
        let (next, r) = blackstart_step(&self.state, m, &self.cfg);
        self.state = next;
        for (addr, v) in &r.commands {
            self.image.set(*addr, *v);
        }
        self.image.set(cmd::BLACKSTART_ACK, next.node.code() as f64);
        let mut events = r.events;
        if let Some(t) = r.transition {
            events.push(format!("transition {:?} -> {:?}", t.from, t.to));
        }
        ControlOutput { image: self.image, events }
    }
}
