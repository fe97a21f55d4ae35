use serde::{Deserialize, Serialize};

use super::registers::{CommandImage, Measurements};
use crate::powersim::{BreakerState, GridState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageKind {
    Stage1Pure,
    Stage2Sil,
    Stage3Chil,
    Stage4Psil,
}

impl StageKind {
    pub fn from_number(n: u8) -> Option<Self> {
        Some(match n {
            1 => Self::Stage1Pure,
            2 => Self::Stage2Sil,
            3 => Self::Stage3Chil,
            4 => Self::Stage4Psil,
            _ => return None,
        })
    }

    pub fn number(self) -> u8 {
        match self {
            Self::Stage1Pure => 1,
            Self::Stage2Sil => 2,
            Self::Stage3Chil => 3,
            Self::Stage4Psil => 4,
        }
    }

    /// Whether the stage carries frames over a (possibly impaired) link.
    pub fn uses_codec(self) -> bool {
        self != Self::Stage1Pure
    }
}

/// One simulation step as exported to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub t_s: f64,
    pub f_hz: f64,
    pub v_pu: f64,
    pub p_load_kw: f64,
    pub p_pv_kw: f64,
    pub p_diesel_kw: f64,
    pub p_batt1_kw: f64,
    pub p_batt2_kw: f64,
    pub soc1: f64,
    pub soc2: f64,
    pub breaker_main: u8,
    pub bank_mask: u32,
    pub pv_curtail_kw: f64,
    /// Anomalies on the message path in this step (drops, timeouts, stale
    /// or undecodable frames, plant-side refusals).
    pub msg_events: Vec<String>,
    pub verdict_events: Vec<String>,
}

impl StepRow {
    pub fn from_state(s: &GridState) -> Self {
        StepRow {
            t_s: s.t_s,
            f_hz: s.f_hz,
            v_pu: s.v_pu,
            p_load_kw: s.p_load_kw + s.p_bank_kw,
            p_pv_kw: s.p_pv_kw,
            p_diesel_kw: s.p_diesel_kw,
            p_batt1_kw: s.p_batt1_kw,
            p_batt2_kw: s.p_batt2_kw,
            soc1: s.soc1,
            soc2: s.soc2,
            breaker_main: u8::from(s.breaker_main == BreakerState::Closed),
            bank_mask: s.bank_mask,
            pv_curtail_kw: s.pv_curtail_kw,
            msg_events: Vec::new(),
            verdict_events: Vec::new(),
        }
    }

    /// Bitwise equality, so that NaN rows compare equal to themselves.
    pub fn bit_eq(&self, o: &Self) -> bool {
        let a = self.floats();
        let b = o.floats();
        a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            && self.breaker_main == o.breaker_main
            && self.bank_mask == o.bank_mask
            && self.msg_events == o.msg_events
            && self.verdict_events == o.verdict_events
    }

    fn floats(&self) -> [f64; 11] {
        [
            self.t_s,
            self.f_hz,
            self.v_pu,
            self.p_load_kw,
            self.p_pv_kw,
            self.p_diesel_kw,
            self.p_batt1_kw,
            self.p_batt2_kw,
            self.soc1,
            self.soc2,
            self.pv_curtail_kw,
        ]
    }
}

/// What happened in one control cycle, from the controller's side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub seq: u16,
    /// Time of the control boundary that opened the cycle.
    pub t_s: f64,
    /// Measurements the controller acted on, if its read came back.
    pub measurements: Option<Measurements>,
    /// Command image the controller produced, if it stepped.
    pub issued: Option<CommandImage>,
    /// Plant command registers at the boundary, i.e. what had been
    /// delivered so far.
    pub delivered: CommandImage,
    pub controller_events: Vec<String>,
}

impl CycleRecord {
    pub fn bit_eq(&self, o: &Self) -> bool {
        let meas_eq = match (&self.measurements, &o.measurements) {
            (Some(a), Some(b)) => a.bit_eq(b),
            (None, None) => true,
            _ => false,
        };
        let issued_eq = match (&self.issued, &o.issued) {
            (Some(a), Some(b)) => a.bit_eq(b),
            (None, None) => true,
            _ => false,
        };
        self.seq == o.seq
            && self.t_s.to_bits() == o.t_s.to_bits()
            && meas_eq
            && issued_eq
            && self.delivered.bit_eq(&o.delivered)
            && self.controller_events == o.controller_events
    }
}

/// A command register write that changed the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedCommand {
    pub step: u64,
    pub t_s: f64,
    pub addr: u16,
    pub value: f64,
    /// Cycle that issued the write.
    pub seq: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ToPlant,
    ToController,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MessageOutcome {
    Delivered { t_arrive: f64 },
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub direction: Direction,
    pub kind: String,
    pub seq: u16,
    pub len: usize,
    pub t_sent: f64,
    pub outcome: MessageOutcome,
}

impl MessageRecord {
    pub fn latency_s(&self) -> Option<f64> {
        match self.outcome {
            MessageOutcome::Delivered { t_arrive } => Some(t_arrive - self.t_sent),
            MessageOutcome::Dropped => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkCounts {
    pub sent: usize,
    pub delivered: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub stage: StageKind,
    pub steps: Vec<StepRow>,
    pub cycles: Vec<CycleRecord>,
    pub applied: Vec<AppliedCommand>,
    pub messages: Vec<MessageRecord>,
    /// Set when the run stopped early (collapse, PHIL trip, transport loss).
    pub aborted: Option<String>,
}

impl Trace {
    pub fn new(stage: StageKind) -> Self {
        Trace {
            stage,
            steps: Vec::new(),
            cycles: Vec::new(),
            applied: Vec::new(),
            messages: Vec::new(),
            aborted: None,
        }
    }

    pub fn link_counts(&self, direction: Direction) -> LinkCounts {
        let mut c = LinkCounts::default();
        for m in self.messages.iter().filter(|m| m.direction == direction) {
            c.sent += 1;
            match m.outcome {
                MessageOutcome::Delivered { .. } => c.delivered += 1,
                MessageOutcome::Dropped => c.dropped += 1,
            }
        }
        c
    }

    pub fn dropped_messages(&self) -> usize {
        self.messages.iter().filter(|m| m.outcome == MessageOutcome::Dropped).count()
    }

    /// Equality of everything that describes plant and controller behavior:
    /// step rows, control cycles and applied commands. Link metadata is not
    /// part of it, since stages differ in how (or whether) they use a link.
    pub fn behavior_eq(&self, o: &Self) -> bool {
        self.steps.len() == o.steps.len()
            && self.cycles.len() == o.cycles.len()
            && self.applied.len() == o.applied.len()
            && self.steps.iter().zip(&o.steps).all(|(a, b)| a.bit_eq(b))
            && self.cycles.iter().zip(&o.cycles).all(|(a, b)| a.bit_eq(b))
            && self.applied.iter().zip(&o.applied).all(|(a, b)| {
                a.step == b.step
                    && a.addr == b.addr
                    && a.seq == b.seq
                    && a.value.to_bits() == b.value.to_bits()
            })
            && self.aborted == o.aborted
    }
}
