//! Serial wire protocol and the gait description language.

pub mod compile;
pub mod crc;
pub mod frame;
pub mod gait;
pub mod payload;

pub use compile::{compile_gait, dump_frames, flatten, wire_bytes, CompileError};
pub use crc::crc16_ccitt_false;
pub use frame::{decode_frame, DecodeError, Decoded, Decoder, Frame, FrameError, Opcode, BROADCAST};
pub use gait::{parse_gait, parse_plants, Diagnostic, DiagnosticKind, GaitProgram, PlantsFile, RunDuration, Span};
pub use payload::QuantizationOverflow;
