//! Fixed-point payload layouts. All integers are big-endian.
//!
//! | opcode       | bytes | layout |
//! |--------------|-------|--------|
//! | CONFIGURE    | 32 | bore µm u32, travel µm u32, dead µL u32, pitch µm u32, steps/rev u16, microsteps u8, invert u8, max rate u32, max accel u32, soft limit µm u32 |
//! | SET_WAVEFORM | 23 | shape u8, period ms u32, amplitude µL u32, duty u16, phase u16, offset µL u32, ramp u16, cycles u32 (0 = forever) |
//! | START        | 4  | run ms u32 (`u32::MAX` = until stopped) |
//! | ACK          | 1  | acknowledged opcode |
//! | NACK         | 2  | rejected opcode, reason code |
//! | TELEMETRY    | 9  | t ms u32, position steps i32, status bits u8 |
//!
//! Fractions are in 1/65536 units.

use thiserror::Error;

use super::frame::{Frame, Opcode};
use crate::error::InvariantError;
use crate::kinematics::{DriveSpec, PumpConfig, SyringeSpec};
use crate::waveform::{Shape, WaveformSpec};

pub const FRACTION_ONE: f64 = 65536.0;
pub const RUN_UNTIL_STOPPED: u32 = u32::MAX;

/// NACK reason codes.
pub mod nack {
    pub const BAD_PAYLOAD: u8 = 0x01;
    pub const INVARIANT: u8 = 0x02;
    pub const NOT_CONFIGURED: u8 = 0x03;
    pub const STROKE: u8 = 0x04;
    pub const BUSY: u8 = 0x05;
}

/// TELEMETRY status bits.
pub mod status {
    pub const RUNNING: u8 = 0x01;
    pub const HOMED: u8 = 0x02;
    pub const FAULT: u8 = 0x80;
}

/// A host value that does not fit its wire field.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field} = {value} does not fit the wire field (representable: {min}..={max})")]
pub struct QuantizationOverflow {
    pub field: &'static str,
    pub value: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PayloadError {
    #[error("expected {expected} payload, frame is {got}")]
    WrongOpcode { expected: Opcode, got: Opcode },
    #[error("unknown waveform shape code {0}")]
    UnknownShape(u8),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
}

/// Rounds `value * scale` to the nearest integer in `min..=max`.
fn quantize(field: &'static str, value: f64, scale: f64, min: u64, max: u64) -> Result<u64, QuantizationOverflow> {
    let q = (value * scale).round();
    if !q.is_finite() || q < min as f64 || q > max as f64 {
        return Err(QuantizationOverflow { field, value, min: min as f64 / scale, max: max as f64 / scale });
    }
    Ok(q as u64)
}

fn q32(field: &'static str, value: f64, scale: f64) -> Result<u32, QuantizationOverflow> {
    quantize(field, value, scale, 0, u64::from(u32::MAX)).map(|q| q as u32)
}

/// Open-interval fraction such as duty: 0 and 1 are not representable.
fn q_fraction(field: &'static str, value: f64) -> Result<u16, QuantizationOverflow> {
    quantize(field, value, FRACTION_ONE, 1, 65535).map(|q| q as u16)
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        head.try_into().expect("split_at returns N bytes")
    }

    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }

    fn u16(&mut self) -> u16 {
        u16::from_be_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_be_bytes(self.take())
    }
}

fn expect_opcode(frame: &Frame, expected: Opcode) -> Result<Reader<'_>, PayloadError> {
    if frame.opcode() != expected {
        return Err(PayloadError::WrongOpcode { expected, got: frame.opcode() });
    }
    Ok(Reader(frame.payload()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConfigurePayload {
    pub bore_um: u32,
    pub max_travel_um: u32,
    pub dead_volume_ul: u32,
    pub pitch_um: u32,
    pub steps_per_rev: u16,
    pub microsteps: u8,
    pub invert: u8,
    pub max_step_rate: u32,
    pub max_accel: u32,
    pub soft_limit_um: u32,
}

impl ConfigurePayload {
    pub fn from_config(config: &PumpConfig) -> Result<Self, QuantizationOverflow> {
        let s = config.syringe();
        let d = config.drive();
        let steps_per_rev = u16::try_from(d.full_steps_per_rev()).map_err(|_| QuantizationOverflow {
            field: "steps_per_rev",
            value: f64::from(d.full_steps_per_rev()),
            min: 0.0,
            max: f64::from(u16::MAX),
        })?;
        Ok(Self {
            bore_um: q32("bore_mm", s.bore_diameter(), 1000.0)?,
            max_travel_um: q32("max_travel_mm", s.max_travel(), 1000.0)?,
            dead_volume_ul: q32("dead_volume_ml", s.dead_volume(), 1000.0)?,
            pitch_um: q32("pitch_mm", d.lead_screw_pitch(), 1000.0)?,
            steps_per_rev,
            // validated to be one of 1..=32
            microsteps: d.microstep_factor() as u8,
            invert: u8::from(d.invert_direction()),
            max_step_rate: q32("max_step_rate", d.max_step_rate(), 1.0)?,
            max_accel: q32("max_accel", d.max_accel(), 1.0)?,
            soft_limit_um: q32("soft_limit_mm", config.soft_limit_margin(), 1000.0)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(32);
        b.extend_from_slice(&self.bore_um.to_be_bytes());
        b.extend_from_slice(&self.max_travel_um.to_be_bytes());
        b.extend_from_slice(&self.dead_volume_ul.to_be_bytes());
        b.extend_from_slice(&self.pitch_um.to_be_bytes());
        b.extend_from_slice(&self.steps_per_rev.to_be_bytes());
        b.push(self.microsteps);
        b.push(self.invert);
        b.extend_from_slice(&self.max_step_rate.to_be_bytes());
        b.extend_from_slice(&self.max_accel.to_be_bytes());
        b.extend_from_slice(&self.soft_limit_um.to_be_bytes());
        b
    }

    pub fn decode(frame: &Frame) -> Result<Self, PayloadError> {
        let mut r = expect_opcode(frame, Opcode::Configure)?;
        Ok(Self {
            bore_um: r.u32(),
            max_travel_um: r.u32(),
            dead_volume_ul: r.u32(),
            pitch_um: r.u32(),
            steps_per_rev: r.u16(),
            microsteps: r.u8(),
            invert: r.u8(),
            max_step_rate: r.u32(),
            max_accel: r.u32(),
            soft_limit_um: r.u32(),
        })
    }

    /// Rebuilds the pump as the firmware sees it.
    pub fn to_config(&self, pump_id: u8) -> Result<PumpConfig, InvariantError> {
        let syringe = SyringeSpec::new(
            f64::from(self.bore_um) / 1000.0,
            f64::from(self.max_travel_um) / 1000.0,
            f64::from(self.dead_volume_ul) / 1000.0,
        )?;
        let drive = DriveSpec::new(
            f64::from(self.pitch_um) / 1000.0,
            u32::from(self.steps_per_rev),
            u32::from(self.microsteps),
            f64::from(self.max_step_rate),
            f64::from(self.max_accel),
            self.invert != 0,
        )?;
        PumpConfig::new(pump_id, syringe, drive, f64::from(self.soft_limit_um) / 1000.0)
    }

    pub fn frame(&self, pump_id: u8) -> Frame {
        Frame::new(pump_id, Opcode::Configure, self.to_bytes()).expect("fixed layout")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WaveformPayload {
    pub shape: u8,
    pub period_ms: u32,
    pub amplitude_ul: u32,
    pub duty: u16,
    pub phase: u16,
    pub offset_ul: u32,
    pub ramp: u16,
    /// 0 runs until stopped.
    pub cycles: u32,
}

impl WaveformPayload {
    pub fn from_spec(wave: &WaveformSpec) -> Result<Self, QuantizationOverflow> {
        // phase is cyclic, so a value that rounds up to a whole turn is 0
        let phase = quantize("phase", wave.phase(), FRACTION_ONE, 0, 65536)? as u32 % 65536;
        Ok(Self {
            shape: wave.shape().code(),
            period_ms: quantize("period", wave.period(), 1000.0, 1, u64::from(u32::MAX))? as u32,
            amplitude_ul: q32("amplitude_ml", wave.amplitude(), 1000.0)?,
            duty: q_fraction("duty", wave.duty())?,
            phase: phase as u16,
            offset_ul: q32("offset_ml", wave.offset(), 1000.0)?,
            ramp: q_fraction("ramp", wave.ramp())?,
            cycles: wave.cycles().unwrap_or(0),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(23);
        b.push(self.shape);
        b.extend_from_slice(&self.period_ms.to_be_bytes());
        b.extend_from_slice(&self.amplitude_ul.to_be_bytes());
        b.extend_from_slice(&self.duty.to_be_bytes());
        b.extend_from_slice(&self.phase.to_be_bytes());
        b.extend_from_slice(&self.offset_ul.to_be_bytes());
        b.extend_from_slice(&self.ramp.to_be_bytes());
        b.extend_from_slice(&self.cycles.to_be_bytes());
        b
    }

    pub fn decode(frame: &Frame) -> Result<Self, PayloadError> {
        let mut r = expect_opcode(frame, Opcode::SetWaveform)?;
        Ok(Self {
            shape: r.u8(),
            period_ms: r.u32(),
            amplitude_ul: r.u32(),
            duty: r.u16(),
            phase: r.u16(),
            offset_ul: r.u32(),
            ramp: r.u16(),
            cycles: r.u32(),
        })
    }

    pub fn to_spec(&self) -> Result<WaveformSpec, PayloadError> {
        let shape = Shape::from_code(self.shape).ok_or(PayloadError::UnknownShape(self.shape))?;
        let mut b =
            WaveformSpec::builder(shape, f64::from(self.period_ms) / 1000.0, f64::from(self.amplitude_ul) / 1000.0)
                .duty(f64::from(self.duty) / FRACTION_ONE)
                .phase(f64::from(self.phase) / FRACTION_ONE)
                .offset(f64::from(self.offset_ul) / 1000.0)
                .ramp(f64::from(self.ramp) / FRACTION_ONE);
        if self.cycles != 0 {
            b = b.cycles(self.cycles);
        }
        Ok(b.build()?)
    }

    pub fn frame(&self, pump_id: u8) -> Frame {
        Frame::new(pump_id, Opcode::SetWaveform, self.to_bytes()).expect("fixed layout")
    }
}

/// Run length carried by START.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StartPayload {
    pub run_ms: u32,
}

impl StartPayload {
    pub fn from_duration(run_s: Option<f64>) -> Result<Self, QuantizationOverflow> {
        let run_ms = match run_s {
            None => RUN_UNTIL_STOPPED,
            Some(s) => quantize("run", s, 1000.0, 0, u64::from(u32::MAX) - 1)? as u32,
        };
        Ok(Self { run_ms })
    }

    pub fn duration(&self) -> Option<f64> {
        (self.run_ms != RUN_UNTIL_STOPPED).then(|| f64::from(self.run_ms) / 1000.0)
    }

    pub fn decode(frame: &Frame) -> Result<Self, PayloadError> {
        let mut r = expect_opcode(frame, Opcode::Start)?;
        Ok(Self { run_ms: r.u32() })
    }

    pub fn frame(&self, pump_id: u8) -> Frame {
        Frame::new(pump_id, Opcode::Start, self.run_ms.to_be_bytes().to_vec()).expect("fixed layout")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TelemetryPayload {
    pub t_ms: u32,
    pub position: i32,
    pub status: u8,
}

impl TelemetryPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(9);
        b.extend_from_slice(&self.t_ms.to_be_bytes());
        b.extend_from_slice(&self.position.to_be_bytes());
        b.push(self.status);
        b
    }

    pub fn decode(frame: &Frame) -> Result<Self, PayloadError> {
        let mut r = expect_opcode(frame, Opcode::Telemetry)?;
        Ok(Self { t_ms: r.u32(), position: r.u32() as i32, status: r.u8() })
    }

    pub fn frame(&self, pump_id: u8) -> Frame {
        Frame::new(pump_id, Opcode::Telemetry, self.to_bytes()).expect("fixed layout")
    }
}

pub fn ack(pump_id: u8, acked: Opcode) -> Frame {
    Frame::new(pump_id, Opcode::Ack, vec![acked as u8]).expect("fixed layout")
}

pub fn nack(pump_id: u8, rejected: Opcode, code: u8) -> Frame {
    Frame::new(pump_id, Opcode::Nack, vec![rejected as u8, code]).expect("fixed layout")
}

pub fn empty(pump_id: u8, opcode: Opcode) -> Frame {
    Frame::new(pump_id, opcode, Vec::new()).expect("empty payload opcode")
}
