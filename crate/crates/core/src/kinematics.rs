//! Volume, plunger travel and microstep conversions for one pump.
//!
//! Units are fixed across the crate: millimetres, millilitres (1 mL =
//! 1000 mm³), seconds and (micro)steps. Positive displaced volume pushes air
//! out of the syringe; negative volume withdraws the plunger and pulls.

use std::f64::consts::PI;
use std::fmt;

use thiserror::Error;

use crate::error::{ensure, InvariantError};
use crate::waveform::WaveformSpec;

const MM3_PER_ML: f64 = 1000.0;

/// Microstep subdivisions accepted by common step/dir drivers.
pub const MICROSTEP_FACTORS: [u32; 6] = [1, 2, 4, 8, 16, 32];

/// Highest addressable pump; 0xFF is the broadcast address on the wire.
pub const MAX_PUMP_ID: u8 = 0xFE;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("stroke of {requested_ml} mL exceeds syringe capacity {capacity_ml} mL")]
    StrokeExceeded { requested_ml: f64, capacity_ml: f64 },
}

/// Syringe barrel geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyringeSpec {
    bore_diameter: f64,
    max_travel: f64,
    dead_volume: f64,
}

impl SyringeSpec {
    /// `bore_mm` and `max_travel_mm` must be positive; `dead_volume_ml` is
    /// the air left in the barrel at full depression.
    pub fn new(bore_mm: f64, max_travel_mm: f64, dead_volume_ml: f64) -> Result<Self, InvariantError> {
        ensure(bore_mm > 0.0 && bore_mm.is_finite(), "bore_mm", "bore_mm > 0", bore_mm)?;
        ensure(max_travel_mm > 0.0 && max_travel_mm.is_finite(), "max_travel_mm", "max_travel_mm > 0", max_travel_mm)?;
        ensure(
            dead_volume_ml >= 0.0 && dead_volume_ml.is_finite(),
            "dead_volume_ml",
            "dead_volume_ml >= 0",
            dead_volume_ml,
        )?;
        Ok(Self { bore_diameter: bore_mm, max_travel: max_travel_mm, dead_volume: dead_volume_ml })
    }

    pub fn bore_diameter(&self) -> f64 {
        self.bore_diameter
    }

    pub fn max_travel(&self) -> f64 {
        self.max_travel
    }

    pub fn dead_volume(&self) -> f64 {
        self.dead_volume
    }

    /// Cross-section of the plunger in mm².
    pub fn plunger_area(&self) -> f64 {
        let radius = self.bore_diameter / 2.0;
        PI * radius * radius
    }

    /// Swept volume over the full travel, in mL.
    pub fn capacity_ml(&self) -> f64 {
        self.plunger_area() * self.max_travel / MM3_PER_ML
    }

    /// Plunger travel (mm, signed) that displaces `dv_ml`.
    pub fn volume_to_travel(&self, dv_ml: f64) -> Result<f64, KinematicsError> {
        let capacity_ml = self.capacity_ml();
        if dv_ml.abs() > capacity_ml || dv_ml.is_nan() {
            return Err(KinematicsError::StrokeExceeded { requested_ml: dv_ml, capacity_ml });
        }
        Ok(dv_ml * MM3_PER_ML / self.plunger_area())
    }

    /// Displaced volume (mL, signed) for a plunger travel in mm.
    pub fn travel_to_volume(&self, travel_mm: f64) -> f64 {
        travel_mm * self.plunger_area() / MM3_PER_ML
    }
}

/// Stepper, driver and lead screw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveSpec {
    lead_screw_pitch: f64,
    full_steps_per_rev: u32,
    microstep_factor: u32,
    max_step_rate: f64,
    max_accel: f64,
    invert_direction: bool,
}

impl DriveSpec {
    pub fn new(
        pitch_mm: f64,
        full_steps_per_rev: u32,
        microstep_factor: u32,
        max_step_rate: f64,
        max_accel: f64,
        invert_direction: bool,
    ) -> Result<Self, InvariantError> {
        ensure(pitch_mm > 0.0 && pitch_mm.is_finite(), "pitch_mm", "pitch_mm > 0", pitch_mm)?;
        ensure(full_steps_per_rev > 0, "steps_per_rev", "steps_per_rev > 0", f64::from(full_steps_per_rev))?;
        ensure(
            MICROSTEP_FACTORS.contains(&microstep_factor),
            "microsteps",
            "microsteps in {1,2,4,8,16,32}",
            f64::from(microstep_factor),
        )?;
        ensure(max_step_rate > 0.0 && max_step_rate.is_finite(), "max_step_rate", "max_step_rate > 0", max_step_rate)?;
        ensure(max_accel > 0.0 && max_accel.is_finite(), "max_accel", "max_accel > 0", max_accel)?;
        Ok(Self {
            lead_screw_pitch: pitch_mm,
            full_steps_per_rev,
            microstep_factor,
            max_step_rate,
            max_accel,
            invert_direction,
        })
    }

    pub fn lead_screw_pitch(&self) -> f64 {
        self.lead_screw_pitch
    }

    pub fn full_steps_per_rev(&self) -> u32 {
        self.full_steps_per_rev
    }

    pub fn microstep_factor(&self) -> u32 {
        self.microstep_factor
    }

    /// Steps per second.
    pub fn max_step_rate(&self) -> f64 {
        self.max_step_rate
    }

    /// Steps per second squared.
    pub fn max_accel(&self) -> f64 {
        self.max_accel
    }

    pub fn invert_direction(&self) -> bool {
        self.invert_direction
    }

    pub fn steps_per_mm(&self) -> f64 {
        f64::from(self.full_steps_per_rev) * f64::from(self.microstep_factor) / self.lead_screw_pitch
    }

    /// Linear travel of one microstep.
    pub fn microstep_travel(&self) -> f64 {
        self.lead_screw_pitch / (f64::from(self.full_steps_per_rev) * f64::from(self.microstep_factor))
    }

    /// Maps between the motor's step direction and push-positive steps.
    /// The mapping is its own inverse.
    pub fn normalize(&self, steps: i64) -> i64 {
        if self.invert_direction {
            -steps
        } else {
            steps
        }
    }

    /// Quantizes `travel_mm` onto the microstep grid.
    ///
    /// Rounds half away from zero so push and pull quantize symmetrically.
    /// The residual is measured before direction inversion, which only
    /// flips the sign of the returned step count.
    pub fn travel_to_steps(&self, travel_mm: f64) -> (i64, f64) {
        let spm = self.steps_per_mm();
        let steps = (travel_mm * spm).round() as i64;
        let residual = travel_mm - steps as f64 / spm;
        (self.normalize(steps), residual)
    }
}

/// One addressable pump unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpConfig {
    pump_id: u8,
    syringe: SyringeSpec,
    drive: DriveSpec,
    soft_limit_margin: f64,
}

impl PumpConfig {
    pub fn new(
        pump_id: u8,
        syringe: SyringeSpec,
        drive: DriveSpec,
        soft_limit_margin_mm: f64,
    ) -> Result<Self, InvariantError> {
        ensure(pump_id <= MAX_PUMP_ID, "pump_id", "pump_id <= 254", f64::from(pump_id))?;
        ensure(
            soft_limit_margin_mm >= 0.0 && soft_limit_margin_mm < syringe.max_travel() / 2.0,
            "soft_limit_mm",
            "0 <= soft_limit_mm < max_travel_mm/2",
            soft_limit_margin_mm,
        )?;
        Ok(Self { pump_id, syringe, drive, soft_limit_margin: soft_limit_margin_mm })
    }

    /// A 60 mL-class syringe on an 8 mm lead screw with a 1.8° motor at
    /// 1/16 microstepping. Example hardware only.
    pub fn example(pump_id: u8) -> Self {
        let syringe = SyringeSpec::new(26.7, 110.0, 0.5).expect("example syringe");
        let drive = DriveSpec::new(8.0, 200, 16, 20_000.0, 200_000.0, false).expect("example drive");
        Self::new(pump_id, syringe, drive, 1.0).expect("example pump")
    }

    pub fn pump_id(&self) -> u8 {
        self.pump_id
    }

    pub fn syringe(&self) -> &SyringeSpec {
        &self.syringe
    }

    pub fn drive(&self) -> &DriveSpec {
        &self.drive
    }

    pub fn soft_limit_margin(&self) -> f64 {
        self.soft_limit_margin
    }

    /// Returns a copy addressed as `pump_id`.
    pub fn with_id(self, pump_id: u8) -> Result<Self, InvariantError> {
        Self::new(pump_id, self.syringe, self.drive, self.soft_limit_margin)
    }

    /// Absolute plunger position (mm from the fully withdrawn end) that
    /// corresponds to zero displaced volume.
    pub fn home_travel(&self) -> f64 {
        self.soft_limit_margin
    }

    /// Volume displaced by one microstep, in mL.
    pub fn microstep_volume(&self) -> f64 {
        self.syringe.travel_to_volume(self.drive.microstep_travel())
    }

    /// Converts motor steps (as emitted, before inversion is undone) back to
    /// displaced volume.
    pub fn steps_to_volume(&self, steps: i64) -> f64 {
        let travel = self.drive.normalize(steps) as f64 / self.drive.steps_per_mm();
        self.syringe.travel_to_volume(travel)
    }

    /// Full volume→motor-step chain, dropping the quantization residual.
    pub fn volume_to_steps(&self, dv_ml: f64) -> Result<i64, KinematicsError> {
        let travel = self.syringe.volume_to_travel(dv_ml)?;
        Ok(self.drive.travel_to_steps(travel).0)
    }

    /// Peak linear flow the drive can sustain, in mL/s.
    pub fn slew_limited_flow(&self) -> f64 {
        self.drive.max_step_rate() / self.drive.steps_per_mm() * self.syringe.plunger_area() / MM3_PER_ML
    }

    /// Checks that every volume the waveform commands fits the syringe and
    /// stays inside the soft travel limits.
    pub fn validate_stroke(&self, wave: &WaveformSpec) -> Result<(), StrokeReport> {
        let mut violations = Vec::new();
        let low = wave.offset();
        let high = wave.offset() + wave.amplitude();

        if low < 0.0 {
            violations.push(StrokeViolation::NegativeOffset { offset_ml: low });
        }
        let available_ml = self.syringe.capacity_ml() - self.syringe.dead_volume();
        if high > available_ml {
            violations.push(StrokeViolation::StrokeExceeded { required_ml: high, available_ml });
        }

        let mm_per_ml = MM3_PER_ML / self.syringe.plunger_area();
        let travel_low = self.home_travel() + low * mm_per_ml;
        let travel_high = self.home_travel() + high * mm_per_ml;
        let lower_limit = self.soft_limit_margin;
        let upper_limit = self.syringe.max_travel() - self.soft_limit_margin;
        if travel_low < lower_limit {
            violations.push(StrokeViolation::BelowSoftLimit { travel_mm: travel_low, limit_mm: lower_limit });
        }
        if travel_high > upper_limit {
            violations.push(StrokeViolation::AboveSoftLimit { travel_mm: travel_high, limit_mm: upper_limit });
        }

        if violations.is_empty() {
            Ok(())
        } else {
            Err(StrokeReport { pump_id: self.pump_id, violations })
        }
    }
}

/// A single bound broken by a waveform on a given pump.
#[derive(Debug, Clone, PartialEq)]
pub enum StrokeViolation {
    NegativeOffset { offset_ml: f64 },
    StrokeExceeded { required_ml: f64, available_ml: f64 },
    BelowSoftLimit { travel_mm: f64, limit_mm: f64 },
    AboveSoftLimit { travel_mm: f64, limit_mm: f64 },
}

impl StrokeViolation {
    /// Signed distance to the bound; negative means violated by that much
    /// (mL for volume bounds, mm for travel bounds).
    pub fn margin(&self) -> f64 {
        match *self {
            StrokeViolation::NegativeOffset { offset_ml } => offset_ml,
            StrokeViolation::StrokeExceeded { required_ml, available_ml } => available_ml - required_ml,
            StrokeViolation::BelowSoftLimit { travel_mm, limit_mm } => travel_mm - limit_mm,
            StrokeViolation::AboveSoftLimit { travel_mm, limit_mm } => limit_mm - travel_mm,
        }
    }
}

impl fmt::Display for StrokeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrokeViolation::NegativeOffset { offset_ml } => {
                write!(f, "offset {offset_ml} mL is below 0")
            }
            StrokeViolation::StrokeExceeded { required_ml, available_ml } => write!(
                f,
                "peak volume {required_ml:.3} mL exceeds usable capacity {available_ml:.3} mL (margin {:.3} mL)",
                self.margin()
            ),
            StrokeViolation::BelowSoftLimit { travel_mm, limit_mm } => {
                write!(f, "travel {travel_mm:.3} mm below soft limit {limit_mm:.3} mm (margin {:.3} mm)", self.margin())
            }
            StrokeViolation::AboveSoftLimit { travel_mm, limit_mm } => write!(
                f,
                "travel {travel_mm:.3} mm beyond soft limit {limit_mm:.3} mm (margin {:.3} mm)",
                self.margin()
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct StrokeReport {
    pub pump_id: u8,
    pub violations: Vec<StrokeViolation>,
}

impl StrokeReport {
    pub fn contains_stroke_exceeded(&self) -> bool {
        self.violations.iter().any(|v| matches!(v, StrokeViolation::StrokeExceeded { .. }))
    }
}

impl fmt::Display for StrokeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pump {}: ", self.pump_id)?;
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}
