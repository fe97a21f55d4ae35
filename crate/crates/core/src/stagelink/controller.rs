//! Controller interface and the protocol host that serves it over frames.

use std::collections::VecDeque;

use super::frame::{decode_frame, encode_frame, Frame, FrameType};
use super::registers::{CommandImage, Measurements, BLOCK_LEN, CMD_BASE, MEAS_BASE};
use crate::mgc::ControlLevel;

/// Result of one controller step: the complete command image it wants the
/// plant to hold, plus free-form events for the trace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlOutput {
    pub image: CommandImage,
    pub events: Vec<String>,
}

/// A supervisory controller. It sees only measurement registers and owns
/// its state, so the same value can be driven directly or over a link.
pub trait Controller: Send {
    fn level(&self) -> ControlLevel;
    /// Seeds the controller's command image with the plant's registers at
    /// t = 0.
    fn init(&mut self, registers: &CommandImage);
    fn step(&mut self, meas: &Measurements) -> ControlOutput;
}

impl<C: Controller + ?Sized> Controller for Box<C> {
    fn level(&self) -> ControlLevel {
        (**self).level()
    }
    fn init(&mut self, registers: &CommandImage) {
        (**self).init(registers)
    }
    fn step(&mut self, meas: &Measurements) -> ControlOutput {
        (**self).step(meas)
    }
}

/// `a` is strictly newer than `b` in wrapping 16-bit sequence space.
pub fn seq_newer(a: u16, b: u16) -> bool {
    let d = a.wrapping_sub(b);
    d != 0 && d < 0x8000
}

/// Smallest contiguous register span covering every change, as
/// `(first_addr, values)`.
pub fn changed_span(image: &CommandImage, base: &CommandImage) -> Option<(u16, Vec<f64>)> {
    let changed = image.changed_from(base);
    let (first, last) = (*changed.first()?, *changed.last()?);
    let values = (first..=last).map(|a| image.get(a)).collect();
    Some((first, values))
}

/// Controller-side protocol state machine.
///
/// TIME_SYNC opens a cycle and is answered with READ_REQ. READ_RESP runs the
/// controller and is answered with a WRITE_REQ covering the registers that
/// differ from the last image the plant acknowledged (count 0 when nothing
/// differs). WRITE_ACK advances the acknowledged image. Each TIME_SYNC and
/// READ_RESP gets exactly one reply; nothing else does.
pub struct ControllerHost {
    controller: Box<dyn Controller>,
    acked: CommandImage,
    acked_seq: Option<u16>,
    outstanding: VecDeque<(u16, CommandImage)>,
    last_resp_seq: Option<u16>,
    events: Vec<(u16, String)>,
}

const MAX_OUTSTANDING: usize = 256;

impl ControllerHost {
    pub fn new(mut controller: Box<dyn Controller>, initial: CommandImage) -> Self {
        controller.init(&initial);
        ControllerHost {
            controller,
            acked: initial,
            acked_seq: None,
            outstanding: VecDeque::new(),
            last_resp_seq: None,
            events: Vec::new(),
        }
    }

    pub fn level(&self) -> ControlLevel {
        self.controller.level()
    }

    /// Controller and protocol events keyed by cycle sequence number.
    pub fn take_events(&mut self) -> Vec<(u16, String)> {
        std::mem::take(&mut self.events)
    }

    pub fn handle(&mut self, bytes: &[u8]) -> Option<Vec<u8>> {
        let frame = match decode_frame(bytes) {
            Ok(f) => f,
            Err(e) => {
                self.events.push((0, format!("decode_error: {e}")));
                return Some(error_frame(0, 0));
            }
        };
        let reply = match frame.kind {
            FrameType::TimeSync => Some(Frame::new(FrameType::ReadReq, frame.seq, MEAS_BASE, vec![])),
            FrameType::ReadResp => Some(self.on_read_resp(&frame)),
            FrameType::WriteAck => {
                self.on_ack(frame.seq);
                None
            }
            FrameType::Error => {
                self.events.push((frame.seq, "plant_error".into()));
                None
            }
            FrameType::ReadReq | FrameType::WriteReq => {
                self.events.push((frame.seq, format!("unexpected_{}", frame.kind.name())));
                None
            }
        };
        reply.map(|f| encode_frame(&f).expect("host frames are within limits"))
    }

    fn on_read_resp(&mut self, frame: &Frame) -> Frame {
        let empty_write = Frame::new(FrameType::WriteReq, frame.seq, CMD_BASE, vec![]);
        if frame.addr != MEAS_BASE || frame.payload.len() != BLOCK_LEN {
            self.events.push((frame.seq, "malformed_read_resp".into()));
            return empty_write;
        }
        if let Some(last) = self.last_resp_seq {
            if !seq_newer(frame.seq, last) {
                self.events.push((frame.seq, "stale_read_resp".into()));
                return empty_write;
            }
        }
        self.last_resp_seq = Some(frame.seq);

        let mut m = Measurements::default();
        m.0.copy_from_slice(&frame.payload);
        let out = self.controller.step(&m);
        self.events.extend(out.events.into_iter().map(|e| (frame.seq, e)));

        if self.outstanding.len() == MAX_OUTSTANDING {
            self.outstanding.pop_front();
        }
        self.outstanding.push_back((frame.seq, out.image));
        match changed_span(&out.image, &self.acked) {
            Some((addr, values)) => Frame::new(FrameType::WriteReq, frame.seq, addr, values),
            None => empty_write,
        }
    }

    fn on_ack(&mut self, seq: u16) {
        if self.acked_seq.is_some_and(|a| !seq_newer(seq, a)) {
            return;
        }
        let Some(pos) = self.outstanding.iter().position(|(s, _)| *s == seq) else {
            return;
        };
        self.acked = self.outstanding[pos].1;
        self.acked_seq = Some(seq);
        self.outstanding.drain(..=pos);
    }
}

fn error_frame(seq: u16, addr: u16) -> Vec<u8> {
    encode_frame(&Frame::new(FrameType::Error, seq, addr, vec![])).expect("empty frame")
}
