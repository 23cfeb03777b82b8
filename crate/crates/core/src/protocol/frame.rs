//! Framing: SOF, byte-stuffed body, CRC-16 trailer.
//!
//! ```text
//! 0x7E | pump_id | opcode | len | payload[len] | crc_hi | crc_lo
//!        \_____________ byte-stuffed, CRC over id..payload _____/
//! ```
//!
//! Inside the body 0x7E and 0x7D are sent as 0x7D followed by the byte
//! XOR 0x20. Every opcode has a fixed payload length, checked on both
//! sides of the link.

use std::fmt;

use thiserror::Error;

use super::crc::{crc16_ccitt_false, Crc16};

pub const SOF: u8 = 0x7E;
pub const ESC: u8 = 0x7D;
pub const ESC_XOR: u8 = 0x20;
pub const BROADCAST: u8 = 0xFF;
pub const MAX_PAYLOAD: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Opcode {
    Configure = 0x01,
    SetWaveform = 0x02,
    Start = 0x03,
    Stop = 0x04,
    Home = 0x05,
    StatusReq = 0x06,
    Ack = 0x80,
    Nack = 0x81,
    Telemetry = 0x82,
}

impl Opcode {
    pub const ALL: [Opcode; 9] = [
        Opcode::Configure,
        Opcode::SetWaveform,
        Opcode::Start,
        Opcode::Stop,
        Opcode::Home,
        Opcode::StatusReq,
        Opcode::Ack,
        Opcode::Nack,
        Opcode::Telemetry,
    ];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|op| *op as u8 == b)
    }

    /// Payload size in bytes; see [`super::payload`] for the layouts.
    pub fn payload_len(self) -> usize {
        match self {
            Opcode::Configure => 32,
            Opcode::SetWaveform => 23,
            Opcode::Start => 4,
            Opcode::Stop | Opcode::Home | Opcode::StatusReq => 0,
            Opcode::Ack => 1,
            Opcode::Nack => 2,
            Opcode::Telemetry => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Opcode::Configure => "CONFIGURE",
            Opcode::SetWaveform => "SET_WAVEFORM",
            Opcode::Start => "START",
            Opcode::Stop => "STOP",
            Opcode::Home => "HOME",
            Opcode::StatusReq => "STATUS_REQ",
            Opcode::Ack => "ACK",
            Opcode::Nack => "NACK",
            Opcode::Telemetry => "TELEMETRY",
        }
    }

    pub fn is_reply(self) -> bool {
        (self as u8) & 0x80 != 0
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    LengthOverflow(usize),
    #[error("{opcode} carries {expected} payload bytes, got {got}")]
    LengthMismatch { opcode: Opcode, expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("CRC mismatch: frame says {received:#06x}, computed {computed:#06x}")]
    CrcMismatch { received: u16, computed: u16 },
    #[error("length byte {0} exceeds {MAX_PAYLOAD}")]
    LengthOverflow(u8),
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("{opcode} carries {expected} payload bytes, frame declares {got}")]
    LengthMismatch { opcode: Opcode, expected: usize, got: usize },
    #[error("escape byte followed by {0:#04x}")]
    EscapeError(u8),
    #[error("start of frame inside a frame; partial frame dropped")]
    UnexpectedSof,
}

/// One host↔pump message. The CRC is computed on encode and checked on
/// decode, so it is not stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pump_id: u8,
    opcode: Opcode,
    payload: Vec<u8>,
}

impl Frame {
    pub fn new(pump_id: u8, opcode: Opcode, payload: Vec<u8>) -> Result<Self, FrameError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(FrameError::LengthOverflow(payload.len()));
        }
        if payload.len() != opcode.payload_len() {
            return Err(FrameError::LengthMismatch { opcode, expected: opcode.payload_len(), got: payload.len() });
        }
        Ok(Self { pump_id, opcode, payload })
    }

    pub fn pump_id(&self) -> u8 {
        self.pump_id
    }

    pub fn opcode(&self) -> Opcode {
        self.opcode
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn is_broadcast(&self) -> bool {
        self.pump_id == BROADCAST
    }

    /// Unstuffed body without the CRC: id, opcode, length, payload.
    pub fn body(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(3 + self.payload.len());
        body.extend_from_slice(&[self.pump_id, self.opcode as u8, self.payload.len() as u8]);
        body.extend_from_slice(&self.payload);
        body
    }

    pub fn crc(&self) -> u16 {
        crc16_ccitt_false(&self.body())
    }

    /// Wire bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut body = self.body();
        body.extend_from_slice(&self.crc().to_be_bytes());
        let mut out = Vec::with_capacity(body.len() + 8);
        out.push(SOF);
        for b in body {
            if b == SOF || b == ESC {
                out.push(ESC);
                out.push(b ^ ESC_XOR);
            } else {
                out.push(b);
            }
        }
        out
    }
}

/// Outcome of [`decode_frame`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Frame(Frame),
    NeedMore,
    Error(DecodeError),
}

/// Decodes the first frame in `bytes`, returning it with the number of
/// bytes consumed. Leading bytes before a SOF are skipped.
pub fn decode_frame(bytes: &[u8]) -> (Decoded, usize) {
    let mut decoder = Decoder::new();
    for (i, &b) in bytes.iter().enumerate() {
        match decoder.push_byte(b) {
            Some(Ok(frame)) => return (Decoded::Frame(frame), i + 1),
            Some(Err(e)) => return (Decoded::Error(e), i + 1),
            None => {}
        }
    }
    (Decoded::NeedMore, bytes.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Hunting,
    Body { escaped: bool },
}

/// Streaming decoder that resynchronizes on SOF after any error.
#[derive(Debug, Clone)]
pub struct Decoder {
    state: State,
    body: Vec<u8>,
    discarded: u64,
}

impl Default for Decoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Decoder {
    pub fn new() -> Self {
        Self { state: State::Hunting, body: Vec::with_capacity(3 + MAX_PAYLOAD + 2), discarded: 0 }
    }

    /// Bytes skipped while hunting for a SOF.
    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    /// Whether a frame is partially received.
    pub fn in_frame(&self) -> bool {
        matches!(self.state, State::Body { .. })
    }

    /// Feeds a chunk, returning every frame or error completed by it.
    pub fn push(&mut self, bytes: &[u8]) -> Vec<Result<Frame, DecodeError>> {
        bytes.iter().filter_map(|&b| self.push_byte(b)).collect()
    }

    pub fn push_byte(&mut self, b: u8) -> Option<Result<Frame, DecodeError>> {
        match self.state {
            State::Hunting => {
                if b == SOF {
                    self.start();
                } else {
                    self.discarded += 1;
                }
                None
            }
            State::Body { .. } if b == SOF => {
                self.start();
                Some(Err(DecodeError::UnexpectedSof))
            }
            State::Body { escaped: true } => {
                if b == (SOF ^ ESC_XOR) || b == (ESC ^ ESC_XOR) {
                    self.state = State::Body { escaped: false };
                    self.accept(b ^ ESC_XOR)
                } else {
                    self.state = State::Hunting;
                    Some(Err(DecodeError::EscapeError(b)))
                }
            }
            State::Body { escaped: false } => {
                if b == ESC {
                    self.state = State::Body { escaped: true };
                    None
                } else {
                    self.accept(b)
                }
            }
        }
    }

    fn start(&mut self) {
        self.body.clear();
        self.state = State::Body { escaped: false };
    }

    fn fail(&mut self, e: DecodeError) -> Option<Result<Frame, DecodeError>> {
        self.state = State::Hunting;
        Some(Err(e))
    }

    fn accept(&mut self, b: u8) -> Option<Result<Frame, DecodeError>> {
        self.body.push(b);
        match self.body.len() {
            2 => {
                if Opcode::from_byte(b).is_none() {
                    return self.fail(DecodeError::UnknownOpcode(b));
                }
                None
            }
            3 => {
                let opcode = Opcode::from_byte(self.body[1]).expect("checked at byte 2");
                if usize::from(b) > MAX_PAYLOAD {
                    return self.fail(DecodeError::LengthOverflow(b));
                }
                if usize::from(b) != opcode.payload_len() {
                    return self.fail(DecodeError::LengthMismatch {
                        opcode,
                        expected: opcode.payload_len(),
                        got: usize::from(b),
                    });
                }
                None
            }
            n if n >= 3 && n == 3 + usize::from(self.body[2]) + 2 => {
                self.state = State::Hunting;
                let split = n - 2;
                let received = u16::from_be_bytes([self.body[split], self.body[split + 1]]);
                let mut crc = Crc16::default();
                crc.update(&self.body[..split]);
                let computed = crc.finish();
                if received != computed {
                    return Some(Err(DecodeError::CrcMismatch { received, computed }));
                }
                let opcode = Opcode::from_byte(self.body[1]).expect("checked at byte 2");
                let frame = Frame { pump_id: self.body[0], opcode, payload: self.body[3..split].to_vec() };
                Some(Ok(frame))
            }
            _ => None,
        }
    }
}
