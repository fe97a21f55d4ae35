//! Bit-exact wire frame.
//!
//! ```text
//! 0x47 0x4C | ver | type | seq (u16 BE) | addr (u16 BE) | count | count x f64 BE | crc (u16 BE)
//! ```
//! The CRC is CRC-16/CCITT-FALSE over `ver ..= payload`.

use std::io::{Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x47, 0x4C];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 9;
pub const CRC_LEN: usize = 2;
pub const MIN_FRAME_LEN: usize = HEADER_LEN + CRC_LEN;
pub const MAX_COUNT: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    ReadReq = 0x01,
    ReadResp = 0x02,
    WriteReq = 0x03,
    WriteAck = 0x04,
    TimeSync = 0x05,
    Error = 0x7F,
}

impl FrameType {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => Self::ReadReq,
            0x02 => Self::ReadResp,
            0x03 => Self::WriteReq,
            0x04 => Self::WriteAck,
            0x05 => Self::TimeSync,
            0x7F => Self::Error,
            _ => return None,
        })
    }

    /// READ_REQ and WRITE_ACK never carry a payload.
    pub fn allows_payload(self) -> bool {
        !matches!(self, Self::ReadReq | Self::WriteAck)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ReadReq => "READ_REQ",
            Self::ReadResp => "READ_RESP",
            Self::WriteReq => "WRITE_REQ",
            Self::WriteAck => "WRITE_ACK",
            Self::TimeSync => "TIME_SYNC",
            Self::Error => "ERROR",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub kind: FrameType,
    pub seq: u16,
    pub addr: u16,
    pub payload: Vec<f64>,
}

/// Payloads compare by bit pattern so NaN payloads round-trip as equal.
impl PartialEq for Frame {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.seq == other.seq
            && self.addr == other.addr
            && self.payload.len() == other.payload.len()
            && self.payload.iter().zip(&other.payload).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Frame {
    pub fn new(kind: FrameType, seq: u16, addr: u16, payload: Vec<f64>) -> Self {
        Frame { kind, seq, addr, payload }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.payload.len() + CRC_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("payload of {0} values exceeds 255")]
    PayloadTooLarge(usize),
    #[error("{0} frames carry no payload")]
    PayloadNotAllowed(&'static str),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("bad length: expected {expected} bytes, got {actual}")]
    BadLength { expected: usize, actual: usize },
    #[error("CRC mismatch: frame says {found:#06x}, computed {computed:#06x}")]
    BadCrc { found: u16, computed: u16 },
    #[error("unknown frame type {0:#04x}")]
    UnknownType(u8),
}

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no xorout.
pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &byte in data {
        crc ^= (byte as u16) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
        }
    }
    crc
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    let count = frame.payload.len();
    if count > MAX_COUNT {
        return Err(FrameError::PayloadTooLarge(count));
    }
    if count > 0 && !frame.kind.allows_payload() {
        return Err(FrameError::PayloadNotAllowed(frame.kind.name()));
    }
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.kind as u8);
    out.extend_from_slice(&frame.seq.to_be_bytes());
    out.extend_from_slice(&frame.addr.to_be_bytes());
    out.push(count as u8);
    for v in &frame.payload {
        out.extend_from_slice(&v.to_be_bytes());
    }
    let crc = crc16_ccitt_false(&out[2..]);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    if bytes.len() < MIN_FRAME_LEN {
        return Err(FrameError::BadLength { expected: MIN_FRAME_LEN, actual: bytes.len() });
    }
    if bytes[0..2] != MAGIC {
        return Err(FrameError::BadMagic);
    }
    if bytes[2] != VERSION {
        return Err(FrameError::BadVersion(bytes[2]));
    }
    let count = bytes[8] as usize;
    let expected = HEADER_LEN + 8 * count + CRC_LEN;
    if bytes.len() != expected {
        return Err(FrameError::BadLength { expected, actual: bytes.len() });
    }
    let body_end = expected - CRC_LEN;
    let found = u16::from_be_bytes([bytes[body_end], bytes[body_end + 1]]);
    let computed = crc16_ccitt_false(&bytes[2..body_end]);
    if found != computed {
        return Err(FrameError::BadCrc { found, computed });
    }
    let kind = FrameType::from_u8(bytes[3]).ok_or(FrameError::UnknownType(bytes[3]))?;
    if count > 0 && !kind.allows_payload() {
        return Err(FrameError::BadLength { expected: MIN_FRAME_LEN, actual: bytes.len() });
    }
    let seq = u16::from_be_bytes([bytes[4], bytes[5]]);
    let addr = u16::from_be_bytes([bytes[6], bytes[7]]);
    let payload = bytes[HEADER_LEN..body_end]
        .chunks_exact(8)
        .map(|c| f64::from_be_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Frame { kind, seq, addr, payload })
}

/// Reads exactly one frame's bytes from an ordered byte stream. The frame is
/// not validated here beyond what is needed to find its end.
pub fn read_frame_bytes<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; HEADER_LEN];
    r.read_exact(&mut buf)?;
    let rest = 8 * buf[8] as usize + CRC_LEN;
    buf.resize(HEADER_LEN + rest, 0);
    r.read_exact(&mut buf[HEADER_LEN..])?;
    Ok(buf)
}

pub fn write_frame_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(bytes)?;
    w.flush()
}
