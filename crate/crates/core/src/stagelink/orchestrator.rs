//! Virtual-time closed loop between the plant and a controller.
//!
//! Every control period the plant side opens a cycle with TIME_SYNC; the
//! controller answers READ_REQ, the plant answers READ_RESP with a snapshot
//! of the measurement block, the controller answers WRITE_REQ and the plant
//! applies it and answers WRITE_ACK. Every frame except TIME_SYNC crosses
//! the link model: it may be dropped, and it reaches the other side at the
//! first simulation step whose time reaches its arrival time. A reply leaves
//! at the arrival time of the frame it answers. The plant keeps stepping
//! while frames are in flight.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::controller::{seq_newer, ControllerHost};
use super::endpoint::{ControllerEndpoint, LocalEndpoint};
use super::frame::{decode_frame, encode_frame, Frame, FrameType};
use super::impair::{impair_message, measurement_channels, AnalogChannel, Delivery, ImpairmentProfile};
use super::registers::{Measurements, BLOCK_LEN, CMD_BASE, MEAS_BASE, REGISTER_COUNT};
use super::trace::{AppliedCommand, CycleRecord, Direction, MessageOutcome, MessageRecord, StageKind, StepRow, Trace};
use super::Controller;
use crate::powersim::Plant;

/// RNG stream ids, so link, analog and power-interface randomness never
/// share draws.
pub const LINK_STREAM: u64 = 1;
pub const ANALOG_STREAM: u64 = 2;
pub const PHIL_STREAM: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSettings {
    #[serde(default)]
    pub profile: ImpairmentProfile,
    /// Virtual-time budget for a cycle's write to reach the plant.
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_timeout() -> f64 {
    1.0
}

impl Default for LinkSettings {
    fn default() -> Self {
        LinkSettings { profile: ImpairmentProfile::null(), timeout_s: default_timeout() }
    }
}

impl LinkSettings {
    pub fn validate(&self) -> Result<(), String> {
        self.profile.validate()?;
        if !(self.timeout_s > 0.0) {
            return Err("LinkSettings.timeout_s must be > 0".into());
        }
        Ok(())
    }
}

pub enum ControllerLink {
    /// In-process controller value.
    Direct(Box<dyn Controller>),
    /// Anything that speaks frames over a byte stream.
    Framed(Box<dyn ControllerEndpoint>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookOutcome {
    pub verdict_events: Vec<String>,
    /// Stops the run, e.g. on an emulated protection trip.
    pub abort: Option<String>,
}

/// Per-step extension of the plant, used by the power-interface stage.
pub trait StepHook {
    /// Called once at t = 0 and after every plant step.
    fn after_step(&mut self, plant: &mut Plant) -> HookOutcome;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("stage mismatch: {0}")]
    StageMismatch(String),
}

struct InFlight {
    direction: Direction,
    kind: FrameType,
    bytes: Vec<u8>,
    t_arrive: f64,
}

struct Run<'a> {
    plant: Plant,
    stage: StageKind,
    link: &'a LinkSettings,
    rng_link: ChaCha8Rng,
    rng_analog: ChaCha8Rng,
    channels: [Option<AnalogChannel>; BLOCK_LEN],
    queue: BTreeMap<(u64, u64, u64), InFlight>,
    order: u64,
    open_cycles: BTreeMap<u16, f64>,
    cycle_index: HashMap<u16, usize>,
    last_write_seq: Option<u16>,
    trace: Trace,
    row_events: Vec<String>,
}

/// Runs the closed loop for the plant's configured duration.
///
/// Stage 1 calls the controller directly. Stage 2 routes frames over an
/// ideal link. Stages 3 and 4 apply `link.profile` to every frame and the
/// analog model to the measurement block; stage 4 also runs `hook` after
/// every plant step.
pub fn run_closed_loop(
    plant: Plant,
    controller: ControllerLink,
    stage: StageKind,
    link: &LinkSettings,
    hook: Option<&mut dyn StepHook>,
) -> Result<Trace, LinkError> {
    link.validate().map_err(LinkError::StageMismatch)?;
    match stage {
        StageKind::Stage1Pure | StageKind::Stage2Sil if !link.profile.is_null() => {
            return Err(LinkError::StageMismatch(format!("{stage:?} forbids impairments")));
        }
        StageKind::Stage4Psil if hook.is_none() => {
            return Err(LinkError::StageMismatch("Stage4Psil requires a power-interface coupling".into()));
        }
        StageKind::Stage1Pure if matches!(controller, ControllerLink::Framed(_)) => {
            return Err(LinkError::StageMismatch("Stage1Pure needs an in-process controller".into()));
        }
        _ => {}
    }

    let seed = plant.config().seed;
    let mut run = Run {
        stage,
        link,
        rng_link: stream_rng(seed, LINK_STREAM),
        rng_analog: stream_rng(seed, ANALOG_STREAM),
        channels: measurement_channels(),
        queue: BTreeMap::new(),
        order: 0,
        open_cycles: BTreeMap::new(),
        cycle_index: HashMap::new(),
        last_write_seq: None,
        trace: Trace::new(stage),
        row_events: Vec::new(),
        plant,
    };

    let initial = run.plant.command_registers();
    let mut direct: Option<(Box<dyn Controller>, super::CommandImage)> = None;
    let mut endpoint: Option<Box<dyn ControllerEndpoint>> = None;
    match controller {
        ControllerLink::Direct(mut c) if stage == StageKind::Stage1Pure => {
            c.init(&initial);
            direct = Some((c, initial));
        }
        ControllerLink::Direct(c) => {
            endpoint = Some(Box::new(LocalEndpoint::new(ControllerHost::new(c, initial))));
        }
        ControllerLink::Framed(e) => endpoint = Some(e),
    }

    let mut hook = hook;
    let mut verdicts = Vec::new();
    if let Some(h) = hook.as_deref_mut() {
        let out = h.after_step(&mut run.plant);
        verdicts = out.verdict_events;
        if let Some(reason) = out.abort {
            run.trace.aborted = Some(reason);
        }
    }

    let cfg = run.plant.config().clone();
    let total = cfg.total_steps() as u64;
    let spp = cfg.steps_per_period() as u64;
    let mut seq: u16 = 0;
    let mut n: u64 = 0;
    while run.trace.aborted.is_none() {
        let t = run.plant.time();
        if n.is_multiple_of(spp) && n < total {
            run.open_cycle(seq, t);
            let res = match (&mut direct, &mut endpoint) {
                (Some((c, last)), _) => {
                    run.direct_cycle(c.as_mut(), last, seq);
                    Ok(())
                }
                (None, Some(e)) => run.framed_cycle(e.as_mut(), seq, t),
                _ => unreachable!("one controller path is always set"),
            };
            if let Err(e) = res {
                run.trace.aborted = Some(e);
            }
            seq = seq.wrapping_add(1);
        }
        if let Some(e) = endpoint.as_mut() {
            if let Err(err) = run.deliver_due(e.as_mut(), n) {
                run.trace.aborted = Some(err);
            }
        }
        run.check_timeouts(t);
        run.record_row(std::mem::take(&mut verdicts));
        if n >= total || run.trace.aborted.is_some() {
            break;
        }
        if let Err(e) = run.plant.advance() {
            run.trace.aborted = Some(e.to_string());
            break;
        }
        n += 1;
        if let Some(h) = hook.as_deref_mut() {
            let out = h.after_step(&mut run.plant);
            verdicts = out.verdict_events;
            if let Some(reason) = out.abort {
                run.record_row(std::mem::take(&mut verdicts));
                run.trace.aborted = Some(reason);
            }
        }
    }
    Ok(run.trace)
}

impl Run<'_> {
    fn open_cycle(&mut self, seq: u16, t: f64) {
        self.cycle_index.insert(seq, self.trace.cycles.len());
        self.trace.cycles.push(CycleRecord {
            seq,
            t_s: t,
            measurements: None,
            issued: None,
            delivered: self.plant.command_registers(),
            controller_events: Vec::new(),
        });
    }

    fn cycle_mut(&mut self, seq: u16) -> Option<&mut CycleRecord> {
        let i = *self.cycle_index.get(&seq)?;
        self.trace.cycles.get_mut(i)
    }

    fn direct_cycle(&mut self, c: &mut dyn Controller, last: &mut super::CommandImage, seq: u16) {
        let m = self.plant.measure();
        let out = c.step(&m);
        for addr in out.image.changed_from(last) {
            self.apply(addr, out.image.get(addr), seq);
        }
        *last = out.image;
        let issued = self.plant.command_registers();
        if let Some(rec) = self.cycle_mut(seq) {
            rec.measurements = Some(m);
            rec.issued = Some(issued);
            rec.controller_events = out.events;
        }
    }

    fn framed_cycle(&mut self, e: &mut dyn ControllerEndpoint, seq: u16, t: f64) -> Result<(), String> {
        self.open_cycles.insert(seq, t);
        let sync = encode_frame(&Frame::new(FrameType::TimeSync, seq, 0, vec![t])).expect("one value");
        let reply = e.exchange(&sync, FrameType::TimeSync).map_err(|err| err.to_string())?;
        self.collect_events(e);
        if let Some(bytes) = reply {
            self.send(Direction::ToPlant, bytes, t);
        }
        Ok(())
    }

    fn apply(&mut self, addr: u16, value: f64, seq: u16) {
        if self.plant.apply_command(addr, value) {
            self.trace.applied.push(AppliedCommand {
                step: self.plant.step_index(),
                t_s: self.plant.time(),
                addr,
                value,
                seq,
            });
        }
    }

    /// Puts a frame on the link.
    fn send(&mut self, direction: Direction, bytes: Vec<u8>, t_send: f64) {
        let (kind, seq) = match decode_frame(&bytes) {
            Ok(f) => (f.kind, f.seq),
            Err(_) => (FrameType::Error, 0),
        };
        let fate = impair_message(bytes.len(), &self.link.profile, &mut self.rng_link, t_send);
        let outcome = match fate {
            Delivery::Delivered { t_arrive } => {
                let due = self.plant.config().step_reaching(t_arrive).max(self.plant.step_index());
                self.queue.insert(
                    (due, t_arrive.to_bits(), self.order),
                    InFlight { direction, kind, bytes: bytes.clone(), t_arrive },
                );
                self.order += 1;
                MessageOutcome::Delivered { t_arrive }
            }
            Delivery::Dropped => {
                self.row_events.push(format!("drop {} seq={seq}", kind.name()));
                MessageOutcome::Dropped
            }
        };
        self.trace.messages.push(MessageRecord {
            direction,
            kind: kind.name().to_string(),
            seq,
            len: bytes.len(),
            t_sent: t_send,
            outcome,
        });
    }

    /// Handles every in-flight frame due at or before step `n`, including
    /// replies that become due within the same step.
    fn deliver_due(&mut self, e: &mut dyn ControllerEndpoint, n: u64) -> Result<(), String> {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > n {
                break;
            }
            let msg = entry.remove();
            match msg.direction {
                Direction::ToPlant => self.plant_receive(msg),
                Direction::ToController => {
                    if msg.kind == FrameType::ReadResp {
                        if let Ok(f) = decode_frame(&msg.bytes) {
                            if f.payload.len() == BLOCK_LEN {
                                let mut m = Measurements::default();
                                m.0.copy_from_slice(&f.payload);
                                if let Some(rec) = self.cycle_mut(f.seq) {
                                    rec.measurements = Some(m);
                                }
                            }
                        }
                    }
                    let reply = e.exchange(&msg.bytes, msg.kind).map_err(|err| err.to_string())?;
                    self.collect_events(e);
                    if let Some(bytes) = reply {
                        self.send(Direction::ToPlant, bytes, msg.t_arrive);
                    }
                }
            }
        }
        Ok(())
    }

    fn plant_receive(&mut self, msg: InFlight) {
        let f = match decode_frame(&msg.bytes) {
            Ok(f) => f,
            Err(err) => {
                self.row_events.push(format!("decode_error {err}"));
                return;
            }
        };
        match f.kind {
            FrameType::ReadReq => {
                let payload = self.snapshot().0.to_vec();
                let resp = Frame::new(FrameType::ReadResp, f.seq, MEAS_BASE, payload);
                self.send(Direction::ToController, encode_frame(&resp).expect("16 values"), msg.t_arrive);
            }
            FrameType::WriteReq => {
                let end = f.addr as usize + f.payload.len();
                if f.addr < CMD_BASE || end > REGISTER_COUNT as usize {
                    self.row_events.push(format!("bad_write_addr seq={} addr={}", f.seq, f.addr));
                    let err = Frame::new(FrameType::Error, f.seq, f.addr, vec![]);
                    self.send(Direction::ToController, encode_frame(&err).expect("empty"), msg.t_arrive);
                    return;
                }
                if self.last_write_seq.is_some_and(|last| !seq_newer(f.seq, last)) {
                    self.row_events.push(format!("stale_write seq={}", f.seq));
                } else {
                    for (i, v) in f.payload.iter().enumerate() {
                        self.apply(f.addr + i as u16, *v, f.seq);
                    }
                    self.last_write_seq = Some(f.seq);
                    let issued = self.plant.command_registers();
                    if let Some(rec) = self.cycle_mut(f.seq) {
                        rec.issued = Some(issued);
                    }
                }
                self.open_cycles.remove(&f.seq);
                let ack = Frame::new(FrameType::WriteAck, f.seq, f.addr, vec![]);
                self.send(Direction::ToController, encode_frame(&ack).expect("empty"), msg.t_arrive);
            }
            FrameType::Error => self.row_events.push(format!("controller_error seq={}", f.seq)),
            other => self.row_events.push(format!("unexpected {} seq={}", other.name(), f.seq)),
        }
    }

    /// Measurement block as the plant's I/O delivers it: exact in stages 1
    /// and 2, through the analog model in stages 3 and 4.
    fn snapshot(&mut self) -> Measurements {
        let mut m = self.plant.measure();
        let analog = matches!(self.stage, StageKind::Stage3Chil | StageKind::Stage4Psil)
            && !self.link.profile.analog_is_identity();
        if analog {
            for (i, ch) in self.channels.iter().enumerate() {
                if let Some(ch) = ch {
                    m.0[i] = ch.transduce(m.0[i], &self.link.profile, &mut self.rng_analog);
                }
            }
        }
        m
    }

    fn collect_events(&mut self, e: &mut dyn ControllerEndpoint) {
        for (seq, ev) in e.take_events() {
            match self.cycle_mut(seq) {
                Some(rec) => rec.controller_events.push(ev),
                None => self.row_events.push(format!("controller_event seq={seq} {ev}")),
            }
        }
    }

    fn check_timeouts(&mut self, t: f64) {
        let budget = self.link.timeout_s;
        let expired: Vec<u16> = self
            .open_cycles
            .iter()
            .filter(|(_, &t0)| t - t0 >= budget - 1e-9)
            .map(|(&s, _)| s)
            .collect();
        for s in expired {
            self.open_cycles.remove(&s);
            self.row_events.push(format!("controller_timeout seq={s}"));
        }
    }

    fn record_row(&mut self, verdicts: Vec<String>) {
        let mut row = StepRow::from_state(self.plant.state());
        row.msg_events = std::mem::take(&mut self.row_events);
        row.msg_events.extend(self.plant.take_notes());
        row.verdict_events = verdicts;
        self.trace.steps.push(row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mgc::{OffgridMgc, OffgridMgcConfig};
    use crate::powersim::{
        DieselGenset, EventKind, FrequencyAnchor, GridEvent, GridScenario, LoadBank, LoadProfile, PvPlant,
        SimConfig,
    };

    fn scenario() -> (GridScenario, SimConfig) {
        let sc = GridScenario {
            anchor: FrequencyAnchor::Diesel,
            diesel: Some(DieselGenset {
                s_rated_kw: 100.0,
                h_s: 2.0,
                droop_pu: 0.05,
                t_gov_s: 0.5,
                min_load_ratio: 0.3,
                p_dispatch_kw: None,
                p_mech_kw: 0.0,
                online: true,
            }),
            pv: Some(PvPlant { p_rated_kw: 40.0, irradiance_wm2: 200.0, curtail_setpoint_kw: None }),
            forming: None,
            following: None,
            load_bank: Some(LoadBank {
                step_sizes_kw: vec![5.0, 10.0, 20.0],
                switch_delay_s: 0.5,
                active_mask: 0,
                pending: vec![],
            }),
            load: LoadProfile { p_kw: 50.0, blocks: 1, energized_blocks: None },
            main_grid: None,
            loss_fraction: 0.0,
            events: vec![GridEvent { t_s: 1.0, kind: EventKind::Irradiance { wm2: 1000.0 } }],
        };
        let cfg = SimConfig { dt_s: 1e-3, control_period_s: 0.1, duration_s: 3.0, f_nominal_hz: 50.0, seed: 7 };
        (sc, cfg)
    }

    fn run(stage: StageKind, profile: ImpairmentProfile) -> Trace {
        let (sc, cfg) = scenario();
        let plant = Plant::new(&sc, &cfg).unwrap();
        let ctrl = Box::new(OffgridMgc::new(OffgridMgcConfig::fixture()).unwrap());
        let link = LinkSettings { profile, timeout_s: 1.0 };
        run_closed_loop(plant, ControllerLink::Direct(ctrl), stage, &link, None).unwrap()
    }

    #[test]
    fn stage1_equals_stage2() {
        let a = run(StageKind::Stage1Pure, ImpairmentProfile::null());
        let b = run(StageKind::Stage2Sil, ImpairmentProfile::null());
        assert!(!a.applied.is_empty());
        assert!(a.behavior_eq(&b));
        assert!(a.messages.is_empty());
        assert_eq!(b.messages.len(), 4 * b.cycles.len());
    }

    #[test]
    fn null_stage3_equals_stage2() {
        let a = run(StageKind::Stage2Sil, ImpairmentProfile::null());
        let b = run(StageKind::Stage3Chil, ImpairmentProfile::null());
        assert!(a.behavior_eq(&b));
        assert_eq!(a.messages, b.messages);
    }

    #[test]
    fn stage1_rejects_impairments() {
        let (sc, cfg) = scenario();
        let plant = Plant::new(&sc, &cfg).unwrap();
        let ctrl = Box::new(OffgridMgc::new(OffgridMgcConfig::fixture()).unwrap());
        let link = LinkSettings {
            profile: ImpairmentProfile { loss_prob: 0.1, ..ImpairmentProfile::null() },
            timeout_s: 1.0,
        };
        let r = run_closed_loop(plant, ControllerLink::Direct(ctrl), StageKind::Stage1Pure, &link, None);
        assert!(matches!(r, Err(LinkError::StageMismatch(_))));
    }

    #[test]
    fn total_loss_is_open_loop() {
        let t = run(StageKind::Stage3Chil, ImpairmentProfile { loss_prob: 1.0, ..ImpairmentProfile::null() });
        assert!(t.applied.is_empty());
        assert!(t.steps.iter().any(|r| r.msg_events.iter().any(|e| e.starts_with("controller_timeout"))));
        let c = t.link_counts(Direction::ToPlant);
        assert_eq!(c.sent, c.delivered + c.dropped);
        assert_eq!(c.delivered, 0);
    }

    #[test]
    fn conservation_under_partial_loss() {
        let t = run(
            StageKind::Stage3Chil,
            ImpairmentProfile { loss_prob: 0.3, jitter_s: 0.01, base_delay_s: 0.02, ..ImpairmentProfile::null() },
        );
        for d in [Direction::ToPlant, Direction::ToController] {
            let c = t.link_counts(d);
            assert_eq!(c.sent, c.delivered + c.dropped);
            assert!(c.dropped > 0);
        }
        assert!(t.steps.windows(2).all(|w| w[0].t_s < w[1].t_s));
    }
}
