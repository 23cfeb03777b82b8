//! Host-side control stack for stepper-driven syringe pumps: volumetric
//! waveforms, step planning, a lumped pneumatic model, the serial wire
//! protocol and a multi-pump orchestrator.

pub mod error;
pub mod kinematics;
pub mod motion;
pub mod orchestrator;
pub mod plant;
pub mod protocol;
pub mod waveform;

pub use error::InvariantError;
pub use kinematics::{DriveSpec, PumpConfig, StrokeReport, StrokeViolation, SyringeSpec};
pub use motion::{plan_move, track, StepTimeline, Tracker};
pub use plant::{simulate, PlantConfig, PlantState};
pub use waveform::{Shape, WaveformSpec};
