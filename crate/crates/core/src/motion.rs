//! Step-pulse planning.
//!
//! [`Tracker`] follows a waveform tick by tick. Target positions are carried
//! in 32.32 fixed point, so the emitted position is always the rounded
//! fixed-point target whenever the drive limits are not engaged. Combined
//! with [`TickSampler`]'s exact periodicity this makes cycling drift free:
//! the position after any whole number of periods equals the start.
//!
//! All tracker positions are push-positive steps measured from the pump's
//! home (zero displaced volume). Timelines store motor-frame directions,
//! i.e. after `invert_direction` has been applied.

use std::io::{self, Write};

use thiserror::Error;

use crate::kinematics::{DriveSpec, PumpConfig, StrokeReport};
use crate::waveform::{tick_count, Shape, TickSampler, WaveformSpec};

/// Control tick used when none is given (1 kHz).
pub const DEFAULT_TICK: f64 = 1e-3;

const PREROLL_PERIODS: u64 = 2;
const MAX_PREROLL_TICKS: u64 = 2_000_000;

const FRAC_BITS: u32 = 32;
const ONE: i64 = 1 << FRAC_BITS;
const HALF: i64 = ONE / 2;

fn to_fixed(steps: f64) -> i64 {
    (steps * ONE as f64).round() as i64
}

fn from_fixed(x: i64) -> f64 {
    x as f64 / ONE as f64
}

/// Round half away from zero on a fixed-point value.
fn round_fixed(x: i64) -> i64 {
    if x >= 0 {
        (x + HALF) >> FRAC_BITS
    } else {
        -((-x + HALF) >> FRAC_BITS)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MotionError {
    #[error(
        "waveform needs {required_steps_per_s:.1} steps/s but the drive allows {available_steps_per_s:.1} steps/s"
    )]
    Infeasible { required_steps_per_s: f64, available_steps_per_s: f64 },
    #[error(transparent)]
    Stroke(#[from] StrokeReport),
    #[error("tick {tick} s is invalid for a drive limited to {max_step_rate} steps/s")]
    InvalidTick { tick: f64, max_step_rate: f64 },
    #[error(
        "waveform needs {required_steps_per_s2:.0} steps/s² but the drive allows {available_steps_per_s2:.0} steps/s²"
    )]
    AccelLimited { required_steps_per_s2: f64, available_steps_per_s2: f64 },
    #[error("a {transition_s:.3} s level change does not fit a {dwell_s:.3} s dwell")]
    SlowTransition { transition_s: f64, dwell_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pulse {
    /// Seconds from the timeline start.
    pub t: f64,
    /// +1 or -1 in motor frame.
    pub direction: i8,
}

/// Timestamped, signed step pulses.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTimeline {
    pub pulses: Vec<Pulse>,
    pub tick: f64,
    /// Sum of all pulse directions.
    pub final_position: i64,
    /// Motor-frame position at `t = 0`, for timelines that track a waveform
    /// from its starting setpoint.
    pub origin: i64,
    /// Covered time span; pulses lie in `[0, duration)`.
    pub duration: f64,
    /// Ticks where the velocity or acceleration limit altered the command.
    pub clamped_ticks: u64,
}

impl StepTimeline {
    pub fn empty(tick: f64, duration: f64) -> Self {
        Self { pulses: Vec::new(), tick, final_position: 0, origin: 0, duration, clamped_ticks: 0 }
    }

    /// Appends `count` pulses evenly spaced across `[start, start + tick)`,
    /// the first at half a spacing in.
    fn push_tick(&mut self, start: f64, count: i64, direction: i8) {
        let n = count.unsigned_abs();
        let spacing = self.tick / n as f64;
        for i in 0..n {
            self.pulses.push(Pulse { t: start + (i as f64 + 0.5) * spacing, direction });
        }
        self.final_position += i64::from(direction) * n as i64;
    }

    /// CSV with header `timestamp_s,direction`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "timestamp_s,direction")?;
        for p in &self.pulses {
            writeln!(out, "{:.9},{}", p.t, p.direction)?;
        }
        Ok(())
    }

    /// Checks the structural invariants against a drive; returns the first
    /// problem found.
    pub fn check(&self, drive: &DriveSpec) -> Result<(), String> {
        if self.pulses.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err("timestamps not strictly increasing".into());
        }
        let sum: i64 = self.pulses.iter().map(|p| i64::from(p.direction)).sum();
        if sum != self.final_position {
            return Err(format!("final_position {} != sum of directions {sum}", self.final_position));
        }
        let limit = per_tick_limit(drive.max_step_rate(), self.tick);
        let mut i = 0;
        while i < self.pulses.len() {
            let bin = (self.pulses[i].t / self.tick).floor();
            let j = self.pulses[i..].iter().take_while(|p| (p.t / self.tick).floor() == bin).count();
            if j as i64 > limit {
                return Err(format!("{j} pulses in tick {bin} exceeds {limit}"));
            }
            i += j;
        }
        let min_gap = 1.0 / drive.max_step_rate();
        if self.pulses.windows(2).any(|w| w[1].t - w[0].t < min_gap * (1.0 - 1e-9)) {
            return Err("pulses closer than 1/max_step_rate".into());
        }
        Ok(())
    }
}

/// Largest speed that can be shed in decrements of `dv` per tick while
/// covering no more than `gap` steps: u + (u - dv) + ... summed over ticks.
fn stopping_speed(gap: f64, dv: f64, tau: f64) -> f64 {
    dv * ((0.25 + 2.0 * gap / (dv * tau)).sqrt() - 0.5)
}

/// Most pulses a drive may emit in one tick.
pub fn per_tick_limit(max_step_rate: f64, tick: f64) -> i64 {
    (max_step_rate * tick * (1.0 + 1e-12)).floor() as i64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerState {
    /// Push-positive steps from home.
    pub position: i64,
    /// Commanded minus emitted position, in [-0.5, 0.5] steps.
    pub residual: f64,
    /// Steps per second.
    pub velocity: f64,
}

/// One control tick of tracker output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickStep {
    /// Tick index; this tick covers `[(k-1)*tick, k*tick)`.
    pub k: u64,
    /// Push-positive steps emitted during the tick.
    pub steps: i64,
    /// Push-positive position at the end of the tick.
    pub position: i64,
    pub target_volume: f64,
    pub clamped: bool,
}

/// Peak step rate the waveform demands on this pump, if bounded.
pub fn required_step_rate(config: &PumpConfig, wave: &WaveformSpec) -> Option<f64> {
    let flow = wave.peak_flow().ok()?;
    Some(flow * steps_per_ml(config))
}

fn steps_per_ml(config: &PumpConfig) -> f64 {
    1000.0 / config.syringe().plunger_area() * config.drive().steps_per_mm()
}

/// Rejects waveforms that cannot be tracked at all: stroke violations,
/// unusable ticks and continuous shapes faster than the drive.
pub fn check_feasible(config: &PumpConfig, wave: &WaveformSpec, tick: f64) -> Result<(), MotionError> {
    config.validate_stroke(wave)?;
    let max_rate = config.drive().max_step_rate();
    if !(tick > 0.0 && tick.is_finite()) || per_tick_limit(max_rate, tick) < 1 {
        return Err(MotionError::InvalidTick { tick, max_step_rate: max_rate });
    }
    if wave.shape() != Shape::Square {
        if let Some(required) = required_step_rate(config, wave) {
            if required > max_rate {
                return Err(MotionError::Infeasible {
                    required_steps_per_s: required,
                    available_steps_per_s: max_rate,
                });
            }
        }
    }
    Ok(())
}

/// Stricter than [`check_feasible`]: the drive must be able to follow the
/// waveform without its limits engaging, except while a square or
/// trapezoid re-acquires its level after a corner.
///
/// Smooth shapes must stay within the per-tick pulse cap and `max_accel`.
/// For square and trapezoid waves, a full-amplitude point-to-point move,
/// plus 10% and five ticks for discrete-time settling, has to fit the
/// shorter of the two half-cycles. Waves that pass are tracked exactly
/// periodically from t = 0.
pub fn check_trackable(config: &PumpConfig, wave: &WaveformSpec, tick: f64) -> Result<(), MotionError> {
    check_feasible(config, wave, tick)?;
    let drive = config.drive();
    let vcap = per_tick_limit(drive.max_step_rate(), tick) as f64 / tick;
    let spml = steps_per_ml(config);
    match wave.shape() {
        Shape::Sine => {
            let rate = required_step_rate(config, wave).unwrap_or(0.0);
            if rate > vcap {
                return Err(MotionError::Infeasible { required_steps_per_s: rate, available_steps_per_s: vcap });
            }
            let accel = wave.peak_accel().unwrap_or(0.0) * spml;
            if accel > drive.max_accel() {
                return Err(MotionError::AccelLimited {
                    required_steps_per_s2: accel,
                    available_steps_per_s2: drive.max_accel(),
                });
            }
        }
        Shape::Trapezoid | Shape::Square => {
            if wave.shape() == Shape::Trapezoid {
                let rate = required_step_rate(config, wave).unwrap_or(0.0);
                if rate > vcap {
                    return Err(MotionError::Infeasible { required_steps_per_s: rate, available_steps_per_s: vcap });
                }
            }
            let distance = (wave.amplitude() * spml).ceil() as u64;
            let transition = MoveProfile::new(distance, vcap, drive.max_accel()).total_time() * 1.1 + 5.0 * tick;
            let dwell = wave.duty().min(1.0 - wave.duty()) * wave.period();
            if transition > dwell {
                return Err(MotionError::SlowTransition { transition_s: transition, dwell_s: dwell });
            }
        }
    }
    Ok(())
}

/// Streaming waveform follower; see the module docs.
#[derive(Debug, Clone)]
pub struct Tracker {
    sampler: TickSampler,
    steps_per_ml: f64,
    tick: f64,
    max_per_tick: i64,
    vcap: f64,
    accel: f64,
    k: i64,
    /// Commanded position, fixed point.
    x: i64,
    position: i64,
    velocity: f64,
    prev_target: f64,
    /// Waveform envelope, fixed point. Catch-up motion brakes so that it
    /// never leaves it; otherwise a corner taken at speed overshoots by up
    /// to v^2 / 2a and can run the plunger past home.
    lo: i64,
    hi: i64,
    clamped_ticks: u64,
}

impl Tracker {
    pub fn new(config: &PumpConfig, wave: &WaveformSpec, tick: f64) -> Result<Self, MotionError> {
        check_feasible(config, wave, tick)?;
        let sampler = TickSampler::new(*wave, tick);
        let steps_per_ml = steps_per_ml(config);
        let max_per_tick = per_tick_limit(config.drive().max_step_rate(), tick);
        let vcap = max_per_tick as f64 / tick;

        // A grid-aligned wave is played for a couple of periods before t = 0
        // so the tracker starts on its periodic orbit: whatever lag the drive
        // limits impose at t = 0 recurs exactly one period later.
        let preroll = sampler
            .ticks_per_period()
            .filter(|&n| n <= MAX_PREROLL_TICKS / PREROLL_PERIODS)
            .map_or(0, |n| (n * PREROLL_PERIODS) as i64);
        let start = sampler.volume_at(-preroll) * steps_per_ml;
        let x = to_fixed(start);
        let velocity = if wave.shape() == Shape::Square {
            0.0
        } else {
            // running start: as if the waveform had been playing before
            let before = sampler.volume_at(-preroll - 1) * steps_per_ml;
            ((start - before) / tick).clamp(-vcap, vcap)
        };
        let mut tracker = Self {
            steps_per_ml,
            tick,
            max_per_tick,
            vcap,
            accel: config.drive().max_accel(),
            k: 0,
            x,
            position: round_fixed(x),
            velocity,
            prev_target: start,
            lo: to_fixed(wave.offset() * steps_per_ml),
            hi: to_fixed((wave.offset() + wave.amplitude()) * steps_per_ml),
            clamped_ticks: 0,
            sampler,
        };
        tracker.k = -preroll;
        while tracker.k < 0 {
            tracker.advance();
        }
        tracker.clamped_ticks = 0;
        Ok(tracker)
    }

    pub fn state(&self) -> PlannerState {
        PlannerState {
            position: self.position,
            residual: from_fixed(self.x - self.position * ONE),
            velocity: self.velocity,
        }
    }

    pub fn tick(&self) -> f64 {
        self.tick
    }

    /// Ticks advanced so far.
    pub fn ticks(&self) -> u64 {
        self.k.max(0) as u64
    }

    pub fn clamped_ticks(&self) -> u64 {
        self.clamped_ticks
    }

    pub fn sampler(&self) -> &TickSampler {
        &self.sampler
    }

    /// Advances one tick.
    pub fn advance(&mut self) -> TickStep {
        self.k += 1;
        let tau = self.tick;
        let target_volume = self.sampler.volume_at(self.k);
        let target_steps = target_volume * self.steps_per_ml;
        let target = to_fixed(target_steps);

        let err = from_fixed(target - self.x);
        let v_req = err / tau;
        let v_target = (target_steps - self.prev_target) / tau;
        let dv = self.accel * tau;
        let within = |u: f64| u.abs() <= dv * (1.0 + 1e-9);
        let mut clamped = false;
        // locking on also needs the speed to match the target's own, or the
        // excess has to be shed again on the next tick
        if v_req.abs() <= self.vcap && within(v_req - self.velocity) && within(v_req - v_target) {
            self.x = target;
            self.velocity = v_req;
        } else {
            clamped = true;
            // gap to where the target was; its own motion is carried by v_target
            let lag = err - v_target * tau;
            let approach = lag.signum() * (lag.abs() / tau).min(stopping_speed(lag.abs(), dv, tau));
            let room_up = from_fixed(self.hi - self.x).max(0.0);
            let room_down = from_fixed(self.x - self.lo).max(0.0);
            let v = (v_target + approach)
                .clamp(self.velocity - dv, self.velocity + dv)
                .clamp(-self.vcap, self.vcap)
                .min((2.0 * self.accel * room_up).sqrt())
                .max(-(2.0 * self.accel * room_down).sqrt());
            self.x = (self.x + to_fixed(v * tau)).clamp(self.lo.min(self.x), self.hi.max(self.x));
            self.velocity = v;
        }
        self.prev_target = target_steps;

        let mut steps = round_fixed(self.x) - self.position;
        if steps.abs() > self.max_per_tick {
            steps = steps.signum() * self.max_per_tick;
            clamped = true;
        }
        self.position += steps;
        let base = self.position * ONE;
        if self.x < base - HALF || self.x > base + HALF {
            self.x = self.x.clamp(base - HALF, base + HALF);
            self.velocity = steps as f64 / tau;
            clamped = true;
        }
        if clamped {
            self.clamped_ticks += 1;
        }
        TickStep { k: self.k.max(0) as u64, steps, position: self.position, target_volume, clamped }
    }
}

/// Plans pulses that follow `wave` for `horizon` seconds.
///
/// The timeline starts at the waveform's t = 0 setpoint (`origin`); the
/// pump is assumed to have been moved there before the run.
pub fn track(config: &PumpConfig, wave: &WaveformSpec, tick: f64, horizon: f64) -> Result<StepTimeline, MotionError> {
    let mut tracker = Tracker::new(config, wave, tick)?;
    let drive = config.drive();
    let ticks = tick_count(horizon, tick);
    let mut timeline = StepTimeline::empty(tick, ticks as f64 * tick);
    timeline.origin = drive.normalize(tracker.state().position);
    for _ in 0..ticks {
        let step = tracker.advance();
        if step.steps != 0 {
            let direction = drive.normalize(step.steps.signum()) as i8;
            timeline.push_tick((step.k - 1) as f64 * tick, step.steps, direction);
        }
    }
    timeline.clamped_ticks = tracker.clamped_ticks();
    Ok(timeline)
}

/// Closed-form trapezoidal (or triangular) move profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoveProfile {
    pub distance: f64,
    pub peak_velocity: f64,
    pub accel: f64,
    pub accel_time: f64,
    pub cruise_time: f64,
}

impl MoveProfile {
    pub fn new(distance: u64, max_velocity: f64, accel: f64) -> Self {
        let n = distance as f64;
        let accel_distance = max_velocity * max_velocity / (2.0 * accel);
        if 2.0 * accel_distance >= n {
            let accel_time = (n / accel).sqrt();
            Self { distance: n, peak_velocity: accel * accel_time, accel, accel_time, cruise_time: 0.0 }
        } else {
            let cruise_time = (n - 2.0 * accel_distance) / max_velocity;
            Self { distance: n, peak_velocity: max_velocity, accel, accel_time: max_velocity / accel, cruise_time }
        }
    }

    pub fn total_time(&self) -> f64 {
        2.0 * self.accel_time + self.cruise_time
    }

    pub fn is_triangular(&self) -> bool {
        self.cruise_time == 0.0
    }

    /// Distance covered after `t` seconds.
    pub fn distance_at(&self, t: f64) -> f64 {
        let total = self.total_time();
        if t <= 0.0 {
            0.0
        } else if t >= total {
            self.distance
        } else if t < self.accel_time {
            0.5 * self.accel * t * t
        } else if t < self.accel_time + self.cruise_time {
            0.5 * self.accel * self.accel_time * self.accel_time + self.peak_velocity * (t - self.accel_time)
        } else {
            let remaining = total - t;
            self.distance - 0.5 * self.accel * remaining * remaining
        }
    }
}

/// Point-to-point move between motor positions on the default tick.
pub fn plan_move(drive: &DriveSpec, from: i64, to: i64) -> StepTimeline {
    let tick = if drive.max_step_rate() * DEFAULT_TICK >= 1.0 { DEFAULT_TICK } else { 1.0 / drive.max_step_rate() };
    plan_move_with_tick(drive, from, to, tick)
}

/// Point-to-point move sampled on `tick`: accelerate at `max_accel`, cruise
/// at no more than the per-tick pulse limit, decelerate. Ends exactly at `to`.
pub fn plan_move_with_tick(drive: &DriveSpec, from: i64, to: i64, tick: f64) -> StepTimeline {
    let distance = (to - from).unsigned_abs();
    let mut timeline = StepTimeline::empty(tick, 0.0);
    timeline.origin = from;
    if distance == 0 {
        return timeline;
    }
    let per_tick = per_tick_limit(drive.max_step_rate(), tick).max(1);
    let vmax = (per_tick as f64 / tick).min(drive.max_step_rate().max(1.0 / tick));
    let profile = MoveProfile::new(distance, vmax, drive.max_accel());
    let direction = (to - from).signum() as i8;

    let mut emitted: i64 = 0;
    let mut k: u64 = 0;
    while emitted < distance as i64 {
        k += 1;
        let s = profile.distance_at(k as f64 * tick);
        // floor keeps pulses on or behind the profile, so the last one lands
        // within a tick after the closed-form end time
        let want = ((s + 1e-9).floor() as i64).min(distance as i64);
        let n = (want - emitted).min(per_tick);
        if n > 0 {
            timeline.push_tick((k - 1) as f64 * tick, n, direction);
            emitted += n;
        }
    }
    timeline.duration = k as f64 * tick;
    timeline
}

/// Peak flow the drive can deliver on this pump, in mL/s.
pub fn slew_limited_flow(config: &PumpConfig) -> f64 {
    config.slew_limited_flow()
}
