//! Off-grid controller keeping the diesel above its minimum load ratio.

use serde::{Deserialize, Serialize};

use super::ControlLevel;
use crate::powersim::{mask_power, MAX_BANK_STEPS};
use crate::stagelink::registers::{cmd, CommandImage, Measurements};
use crate::stagelink::{ControlOutput, Controller};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OffgridMode {
    LoadBanks,
    PvCurtailment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffgridMgcConfig {
    #[serde(default = "default_ratio")]
    pub min_load_ratio: f64,
    #[serde(default)]
    pub hysteresis_kw: f64,
    pub mode: OffgridMode,
    /// Must mirror the plant's load bank.
    #[serde(default)]
    pub bank_steps_kw: Vec<f64>,
    pub s_rated_kw: f64,
    /// PV rating, the upper bound of the curtailment setpoint.
    #[serde(default)]
    pub pv_rated_kw: f64,
}

fn default_ratio() -> f64 {
    0.30
}

impl OffgridMgcConfig {
    /// Desk-scale defaults: 100 kW diesel, banks {5, 10, 20} kW, 40 kW PV.
    pub fn fixture() -> Self {
        OffgridMgcConfig {
            min_load_ratio: 0.30,
            hysteresis_kw: 5.0,
            mode: OffgridMode::LoadBanks,
            bank_steps_kw: vec![5.0, 10.0, 20.0],
            s_rated_kw: 100.0,
            pv_rated_kw: 40.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.min_load_ratio > 0.0 && self.min_load_ratio < 1.0) {
            return Err("OffgridMgcConfig.min_load_ratio must be in (0, 1)".into());
        }
        if !(self.hysteresis_kw >= 0.0) {
            return Err("OffgridMgcConfig.hysteresis_kw must be >= 0".into());
        }
        if !(self.s_rated_kw > 0.0) {
            return Err("OffgridMgcConfig.s_rated_kw must be > 0".into());
        }
        if !(self.pv_rated_kw >= 0.0) {
            return Err("OffgridMgcConfig.pv_rated_kw must be >= 0".into());
        }
        if self.bank_steps_kw.len() > MAX_BANK_STEPS {
            return Err(format!("OffgridMgcConfig.bank_steps_kw has more than {MAX_BANK_STEPS} steps"));
        }
        if self.bank_steps_kw.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err("OffgridMgcConfig.bank_steps_kw entries must be > 0".into());
        }
        Ok(())
    }

    pub fn min_load_kw(&self) -> f64 {
        self.min_load_ratio * self.s_rated_kw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OffgridInputs {
    pub p_load_kw: f64,
    pub p_pv_kw: f64,
    pub p_diesel_kw: f64,
    /// Bank consumption actually measured (lags commands by the switch delay).
    pub p_bank_kw: f64,
}

impl OffgridInputs {
    pub fn from_measurements(m: &Measurements) -> Self {
        OffgridInputs {
            p_load_kw: m.p_load(),
            p_pv_kw: m.p_pv(),
            p_diesel_kw: m.p_diesel(),
            p_bank_kw: m.p_bank(),
        }
    }
}

/// Dispatch memory: the bank mask last commanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OffgridState {
    pub commanded_mask: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OffgridCommands {
    /// New bank mask, when it changes.
    pub bank_mask: Option<u32>,
    pub pv_curtail_kw: Option<f64>,
    /// Set when the remaining steps cannot cover the deficit; every step was
    /// activated anyway.
    pub insufficient_capacity: Option<(f64, f64)>,
}

/// Minimal-total subset of the steps in `candidates` whose power reaches
/// `deficit_kw`. Ties go to fewer steps, then to the lexicographically
/// smallest index list. `None` when even all candidates fall short.
pub fn minimal_cover(steps: &[f64], candidates: u32, deficit_kw: f64) -> Option<u32> {
    let idx: Vec<usize> = (0..steps.len()).filter(|&i| candidates >> i & 1 == 1).collect();
    let mut suffix = vec![0.0; idx.len() + 1];
    for k in (0..idx.len()).rev() {
        suffix[k] = suffix[k + 1] + steps[idx[k]];
    }
    let mut best: Option<(f64, u32, u32)> = None;
    search(steps, &idx, &suffix, 0, 0, 0.0, deficit_kw, &mut best);
    best.map(|(_, _, mask)| mask)
}

/// Index-ordered depth-first search. Sums are accumulated in index order so
/// they match [`mask_power`] bit for bit.
#[allow(clippy::too_many_arguments)]
fn search(
    steps: &[f64],
    idx: &[usize],
    suffix: &[f64],
    k: usize,
    mask: u32,
    sum: f64,
    deficit: f64,
    best: &mut Option<(f64, u32, u32)>,
) {
    if sum >= deficit {
        let cand = (mask_power(steps, mask), mask.count_ones(), mask);
        if best.is_none_or(|b| better(&cand, &b)) {
            *best = Some(cand);
        }
        return;
    }
    if k == idx.len() || sum + suffix[k] < deficit {
        return;
    }
    if let Some(b) = best {
        if sum > b.0 {
            return;
        }
    }
    let i = idx[k];
    search(steps, idx, suffix, k + 1, mask | 1 << i, sum + steps[i], deficit, best);
    search(steps, idx, suffix, k + 1, mask, sum, deficit, best);
}

fn better(a: &(f64, u32, u32), b: &(f64, u32, u32)) -> bool {
    if a.0 != b.0 {
        return a.0 < b.0;
    }
    if a.1 != b.1 {
        return a.1 < b.1;
    }
    lex_less(a.2, b.2)
}

/// Compares the ascending index lists of two masks with the same number of
/// bits lexicographically.
fn lex_less(a: u32, b: u32) -> bool {
    let diff = a ^ b;
    if diff == 0 {
        return false;
    }
    // the first index where the lists differ is the lowest differing bit;
    // the list holding it has the smaller element there
    let low = diff & diff.wrapping_neg();
    a & low != 0
}

/// One dispatch decision.
///
/// The diesel's loading is projected to account for bank steps already
/// commanded but not yet switched in, so a command is not repeated while the
/// bank delay runs.
pub fn offgrid_mgc_step(
    inp: &OffgridInputs,
    state: &OffgridState,
    cfg: &OffgridMgcConfig,
) -> (OffgridState, OffgridCommands) {
    let r_s = cfg.min_load_kw();
    let mut out = OffgridCommands::default();
    match cfg.mode {
        OffgridMode::PvCurtailment => {
            let sp = (inp.p_load_kw + inp.p_bank_kw - r_s).clamp(0.0, cfg.pv_rated_kw);
            out.pv_curtail_kw = Some(sp);
            (*state, out)
        }
        OffgridMode::LoadBanks => {
            let steps = &cfg.bank_steps_kw;
            let full = if steps.is_empty() { 0 } else { u32::MAX >> (32 - steps.len()) };
            let mask = state.commanded_mask & full;
            let commanded = mask_power(steps, mask);
            let projected = inp.p_diesel_kw + commanded - inp.p_bank_kw;
            let mut next = mask;
            if projected < r_s {
                let deficit = r_s - projected;
                let inactive = full & !mask;
                match minimal_cover(steps, inactive, deficit) {
                    Some(add) => next |= add,
                    None => {
                        next = full;
                        out.insufficient_capacity = Some((deficit, mask_power(steps, inactive)));
                    }
                }
            } else if let Some(i) = smallest_active(steps, mask) {
                if projected - steps[i] >= r_s + cfg.hysteresis_kw {
                    next &= !(1 << i);
                }
            }
            if next != mask {
                out.bank_mask = Some(next);
            }
            (OffgridState { commanded_mask: next }, out)
        }
    }
}

/// Smallest active step, lowest index on ties.
fn smallest_active(steps: &[f64], mask: u32) -> Option<usize> {
    (0..steps.len())
        .filter(|&i| mask >> i & 1 == 1)
        .min_by(|&a, &b| steps[a].total_cmp(&steps[b]).then(a.cmp(&b)))
}

/// Off-grid MGC hosted behind the controller interface.
#[derive(Debug, Clone)]
pub struct OffgridMgc {
    cfg: OffgridMgcConfig,
    state: OffgridState,
    image: CommandImage,
}

impl OffgridMgc {
    pub fn new(cfg: OffgridMgcConfig) -> Result<Self, String> {
        cfg.validate()?;
        Ok(OffgridMgc { cfg, state: OffgridState::default(), image: CommandImage::default() })
    }

    pub fn state(&self) -> &OffgridState {
        &self.state
    }
}

impl Controller for OffgridMgc {
    fn level(&self) -> ControlLevel {
        ControlLevel::d3()
    }

    fn init(&mut self, registers: &CommandImage) {
        self.image = *registers;
        let m = registers.get(cmd::BANK_MASK);
        self.state.commanded_mask = if m.is_finite() && m >= 0.0 { m.round() as u32 } else { 0 };
    }

    fn step(&mut self, meas: &Measurements) -> ControlOutput {
        let (next, cmds) = offgrid_mgc_step(&OffgridInputs::from_measurements(meas), &self.state, &self.cfg);
        self.state = next;
        let mut events = Vec::new();
        if let Some(mask) = cmds.bank_mask {
            self.image.set(cmd::BANK_MASK, mask as f64);
        }
        if let Some(sp) = cmds.pv_curtail_kw {
            self.image.set(cmd::PV_CURTAIL, sp);
        }
        if let Some((deficit, avail)) = cmds.insufficient_capacity {
            events.push(format!(
                "insufficient_bank_capacity deficit_kw={deficit} available_kw={avail}"
            ));
        }
        ControlOutput { image: self.image, events }
    }
}
