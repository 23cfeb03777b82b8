//! Periodic displaced-volume targets for one pump.
//!
//! A waveform maps time to the volume the syringe should have displaced
//! relative to its home position: `offset + amplitude * g(u)`, where `u` is
//! the position within the current cycle and `g` is a unit shape in [0, 1].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::error::{ensure, InvariantError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    /// Raised cosine. With duty other than 0.5 the rise and fall are two
    /// half-cosines of unequal length.
    Sine,
    Trapezoid,
    /// Setpoint steps; the planner slews between them.
    Square,
}

impl Shape {
    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Sine => "sine",
            Shape::Trapezoid => "trapezoid",
            Shape::Square => "square",
        }
    }

    /// Wire code used by SET_WAVEFORM.
    pub fn code(self) -> u8 {
        match self {
            Shape::Sine => 0,
            Shape::Trapezoid => 1,
            Shape::Square => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Shape::Sine),
            1 => Some(Shape::Trapezoid),
            2 => Some(Shape::Square),
            _ => None,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Shape {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "sine" => Ok(Shape::Sine),
            "trapezoid" => Ok(Shape::Trapezoid),
            "square" => Ok(Shape::Square),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WaveformError {
    #[error("square waves have no bounded nominal slew; use the drive's slew-limited flow")]
    UnboundedSlew,
}

/// One pump's periodic actuation pattern. Construct through
/// [`WaveformSpec::builder`]; all fields are validated there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveformSpec {
    shape: Shape,
    period: f64,
    amplitude: f64,
    duty: f64,
    phase: f64,
    offset: f64,
    ramp: f64,
    cycles: Option<u32>,
}

/// Default trapezoid ramp as a fraction of the shorter half of the cycle.
pub const DEFAULT_RAMP_FRACTION: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct WaveformBuilder {
    shape: Shape,
    period: f64,
    amplitude: f64,
    duty: f64,
    phase: f64,
    offset: f64,
    ramp: Option<f64>,
    cycles: Option<u32>,
}

impl WaveformBuilder {
    pub fn duty(mut self, duty: f64) -> Self {
        self.duty = duty;
        self
    }

    pub fn phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }

    pub fn offset(mut self, offset_ml: f64) -> Self {
        self.offset = offset_ml;
        self
    }

    pub fn ramp(mut self, ramp: f64) -> Self {
        self.ramp = Some(ramp);
        self
    }

    pub fn cycles(mut self, cycles: u32) -> Self {
        self.cycles = Some(cycles);
        self
    }

    pub fn build(self) -> Result<WaveformSpec, InvariantError> {
        let p = self.period;
        ensure(p > 0.0 && p.is_finite(), "period", "period > 0", p)?;
        ensure(
            self.amplitude >= 0.0 && self.amplitude.is_finite(),
            "amplitude_ml",
            "amplitude_ml >= 0",
            self.amplitude,
        )?;
        ensure(self.duty > 0.0 && self.duty < 1.0, "duty", "0 < duty < 1", self.duty)?;
        ensure(self.phase >= 0.0 && self.phase < 1.0, "phase", "0 <= phase < 1", self.phase)?;
        ensure(self.offset >= 0.0 && self.offset.is_finite(), "offset_ml", "offset_ml >= 0", self.offset)?;
        let shorter = self.duty.min(1.0 - self.duty);
        let ramp = self.ramp.unwrap_or(DEFAULT_RAMP_FRACTION * shorter);
        if self.shape == Shape::Trapezoid {
            ensure(ramp > 0.0 && ramp <= shorter, "ramp", "0 < ramp <= min(duty, 1-duty)", ramp)?;
        }
        if let Some(c) = self.cycles {
            ensure(c > 0, "cycles", "cycles > 0", f64::from(c))?;
        }
        Ok(WaveformSpec {
            shape: self.shape,
            period: self.period,
            amplitude: self.amplitude,
            duty: self.duty,
            phase: self.phase,
            offset: self.offset,
            ramp,
            cycles: self.cycles,
        })
    }
}

impl WaveformSpec {
    /// Starts a waveform with duty 0.5, phase 0, offset 0, the default ramp
    /// and no cycle limit.
    pub fn builder(shape: Shape, period_s: f64, amplitude_ml: f64) -> WaveformBuilder {
        WaveformBuilder {
            shape,
            period: period_s,
            amplitude: amplitude_ml,
            duty: 0.5,
            phase: 0.0,
            offset: 0.0,
            ramp: None,
            cycles: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn duty(&self) -> f64 {
        self.duty
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn ramp(&self) -> f64 {
        self.ramp
    }

    pub fn cycles(&self) -> Option<u32> {
        self.cycles
    }

    /// Total run time for a finite waveform.
    pub fn active_duration(&self) -> Option<f64> {
        self.cycles.map(|c| f64::from(c) * self.period)
    }

    /// Same waveform with a different phase.
    pub fn with_phase(&self, phase: f64) -> Result<Self, InvariantError> {
        ensure((0.0..1.0).contains(&phase), "phase", "0 <= phase < 1", phase)?;
        Ok(Self { phase, ..*self })
    }

    /// Unit shape `g(u)` for `u` in [0, 1).
    pub fn unit_shape(&self, u: f64) -> f64 {
        let d = self.duty;
        match self.shape {
            Shape::Sine => {
                if u < d {
                    (1.0 - (PI * u / d).cos()) / 2.0
                } else {
                    (1.0 + (PI * (u - d) / (1.0 - d)).cos()) / 2.0
                }
            }
            Shape::Trapezoid => {
                let r = self.ramp;
                if u < r {
                    u / r
                } else if u < d {
                    1.0
                } else if u < d + r {
                    1.0 - (u - d) / r
                } else {
                    0.0
                }
            }
            Shape::Square => {
                if u < d {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Position within the cycle at time `t`, phase included.
    ///
    /// `t` is reduced modulo the period first (`%` on f64 is exact), so
    /// `t` and `t + period` give bit-identical results whenever `t + period`
    /// is itself exact.
    pub fn cycle_fraction(&self, t: f64) -> f64 {
        let p = self.period;
        let mut s = t % p + self.phase * p;
        if s >= p {
            s -= p;
        }
        let u = s / p;
        if u >= 1.0 {
            0.0
        } else {
            u
        }
    }

    /// Commanded volume at cycle position `u`, ignoring any cycle limit.
    pub fn volume_at_fraction(&self, u: f64) -> f64 {
        self.offset + self.amplitude * self.unit_shape(u)
    }

    /// Commanded displaced volume in mL at `t >= 0`.
    pub fn target_volume(&self, t: f64) -> f64 {
        if let Some(end) = self.active_duration() {
            if t >= end {
                return self.offset;
            }
        }
        self.volume_at_fraction(self.cycle_fraction(t))
    }

    /// Largest |dV/dt| over a cycle, in mL/s.
    pub fn peak_flow(&self) -> Result<f64, WaveformError> {
        match self.shape {
            Shape::Sine => {
                let shorter = self.duty.min(1.0 - self.duty);
                Ok(self.amplitude * PI / (2.0 * shorter * self.period))
            }
            Shape::Trapezoid => Ok(self.amplitude / (self.ramp * self.period)),
            Shape::Square => Err(WaveformError::UnboundedSlew),
        }
    }

    /// Largest |d²V/dt²| over a cycle in mL/s², if bounded. Trapezoid
    /// corners and square edges are unbounded.
    pub fn peak_accel(&self) -> Option<f64> {
        match self.shape {
            Shape::Sine => {
                let shorter = self.duty.min(1.0 - self.duty);
                let w = PI / (shorter * self.period);
                Some(self.amplitude * w * w / 2.0)
            }
            _ if self.amplitude == 0.0 => Some(0.0),
            _ => None,
        }
    }

    /// Samples at `0, tick, 2*tick, ...` up to `horizon`.
    pub fn sample(&self, tick: f64, horizon: f64) -> Vec<(f64, f64)> {
        assert!(tick > 0.0, "tick must be positive");
        let n = tick_count(horizon, tick);
        (0..=n)
            .map(|k| {
                let t = k as f64 * tick;
                (t, self.target_volume(t))
            })
            .collect()
    }
}

/// Number of whole ticks that fit in `horizon`, tolerating the rounding of
/// decimal tick sizes (2.0 / 0.001 must give 2000).
pub fn tick_count(horizon: f64, tick: f64) -> u64 {
    if horizon <= 0.0 {
        return 0;
    }
    (horizon / tick * (1.0 + 1e-12)).floor() as u64
}

/// Per-tick sampling of a waveform.
///
/// When the period is a whole number of ticks `n`, the cycle position is
/// taken from integer tick arithmetic: with the phase written as `m + f`
/// ticks (`f` in [0, 1)), tick `k` maps to `(((k + m) mod n) + f) / n`.
/// That makes the sample sequence exactly periodic, and a phase of whole
/// ticks an exact index shift, which the motion planner relies on for
/// drift-free cycling. Otherwise the floating-point
/// [`WaveformSpec::target_volume`] path is used.
#[derive(Debug, Clone)]
pub struct TickSampler {
    wave: WaveformSpec,
    tick: f64,
    grid: Option<TickGrid>,
}

#[derive(Debug, Clone, Copy)]
struct TickGrid {
    ticks_per_period: u64,
    phase_ticks: u64,
    phase_frac: f64,
}

impl TickSampler {
    pub fn new(wave: WaveformSpec, tick: f64) -> Self {
        let grid = Self::grid_for(&wave, tick);
        Self { wave, tick, grid }
    }

    fn grid_for(wave: &WaveformSpec, tick: f64) -> Option<TickGrid> {
        let n = (wave.period / tick).round();
        if !(1.0..=1e15).contains(&n) || (n * tick - wave.period).abs() > 1e-9 * wave.period {
            return None;
        }
        let shift = wave.phase * n;
        let near = shift.round();
        // phases within float noise of a whole tick count as whole ticks
        let (m, phase_frac) =
            if (shift - near).abs() <= 1e-9 { (near, 0.0) } else { (shift.floor(), shift - shift.floor()) };
        let ticks_per_period = n as u64;
        Some(TickGrid { ticks_per_period, phase_ticks: (m as u64) % ticks_per_period, phase_frac })
    }

    pub fn wave(&self) -> &WaveformSpec {
        &self.wave
    }

    pub fn tick(&self) -> f64 {
        self.tick
    }

    /// Whether samples come from exact integer tick arithmetic.
    pub fn is_grid_aligned(&self) -> bool {
        self.grid.is_some()
    }

    /// Period length in ticks when grid aligned.
    pub fn ticks_per_period(&self) -> Option<u64> {
        self.grid.map(|g| g.ticks_per_period)
    }

    /// Target volume at tick `k` (which may be negative for look-back).
    pub fn volume_at(&self, k: i64) -> f64 {
        match self.grid {
            Some(g) => {
                let n = g.ticks_per_period as i64;
                if let Some(c) = self.wave.cycles {
                    if k >= 0 && k as i128 >= i128::from(c) * i128::from(n) {
                        return self.wave.offset;
                    }
                }
                let j = (k + g.phase_ticks as i64).rem_euclid(n);
                self.wave.volume_at_fraction((j as f64 + g.phase_frac) / n as f64)
            }
            None => {
                let t = k as f64 * self.tick;
                if t >= 0.0 {
                    self.wave.target_volume(t)
                } else {
                    let p = self.wave.period;
                    self.wave.volume_at_fraction(self.wave.cycle_fraction(t.rem_euclid(p)))
                }
            }
        }
    }
}
