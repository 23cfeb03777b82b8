//! Runs a gait program on simulated pumps or over a serial link, with one
//! shared t = 0 for every pump.

mod serial;
mod sim;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::motion::MotionError;
use crate::plant::{PlantConfig, PlantError};
use crate::protocol::{CompileError, GaitProgram, Opcode, PlantsFile};

pub use serial::{run_serial, SerialLink, SerialPortTransport, Transport, ACK_RETRIES, ACK_TIMEOUT};
pub use sim::run_sim;

/// 100 Hz per pump.
pub const DEFAULT_CADENCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Control tick in seconds.
    pub tick: f64,
    /// Telemetry interval in seconds; a whole number of ticks.
    pub cadence: f64,
    /// Overrides the program's `run` length.
    pub duration: Option<f64>,
    /// Advance pumps on the rayon pool.
    pub parallel: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { tick: crate::motion::DEFAULT_TICK, cadence: DEFAULT_CADENCE, duration: None, parallel: true }
    }
}

impl RunOptions {
    /// Ticks per telemetry record.
    pub fn ticks_per_record(&self) -> Result<u64, RunError> {
        if !(self.tick > 0.0 && self.tick.is_finite()) {
            return Err(RunError::InvalidOptions(format!("tick {} s must be positive", self.tick)));
        }
        let ratio = self.cadence / self.tick;
        let r = ratio.round();
        if !(r >= 1.0 && (ratio - r).abs() <= 1e-9 * r) {
            return Err(RunError::InvalidOptions(format!(
                "telemetry interval {} s is not a whole number of {} s ticks",
                self.cadence, self.tick
            )));
        }
        Ok(r as u64)
    }

    /// Run length: the override, else the program's `run`, else the end of
    /// the longest finite wave.
    pub fn horizon(&self, program: &GaitProgram) -> Result<f64, RunError> {
        if let Some(d) = self.duration.or(program.run.seconds()) {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(RunError::InvalidOptions(format!("duration {d} s must be non-negative")));
            }
            return Ok(d);
        }
        let mut end: f64 = 0.0;
        for w in program.waves.values() {
            match w.spec.active_duration() {
                Some(d) => end = end.max(d),
                None => return Err(RunError::UnboundedRun),
            }
        }
        Ok(end)
    }
}

/// Cooperative stop flag, checked between telemetry blocks.
#[derive(Debug, Clone, Default)]
pub struct StopHandle(Arc<AtomicBool>);

impl StopHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    fn reset(&self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelemetryRecord {
    pub t: f64,
    pub pump_id: u8,
    pub commanded_volume: f64,
    /// Motor-frame steps from home.
    pub position: i64,
    /// Simulation only.
    pub voxel_pressure: Option<f64>,
}

pub const TELEMETRY_HEADER: &str = "t_s,pump_id,commanded_ml,position_steps,voxel_pa";

pub fn write_telemetry_csv<W: Write>(records: &[TelemetryRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "{TELEMETRY_HEADER}")?;
    for r in records {
        write!(out, "{:.6},{},{:.9},{},", r.t, r.pump_id, r.commanded_volume, r.position)?;
        match r.voxel_pressure {
            Some(p) => writeln!(out, "{p:.6}")?,
            None => writeln!(out)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PumpSummary {
    pub pump_id: u8,
    pub name: String,
    pub cycles_completed: u64,
    pub max_abs_position: i64,
    pub final_position: i64,
    /// Ticks where the drive limits kept the pump off its target.
    pub clamped_ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExitReport {
    pub pumps: Vec<PumpSummary>,
    /// Time reached, in seconds.
    pub end_time: f64,
    /// Set when the run ended through [`stop_all`].
    pub stopped_at: Option<f64>,
    pub records: usize,
    pub errors: Vec<String>,
}

impl fmt::Display for ExitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stopped_at {
            Some(t) => writeln!(f, "stopped at t = {t:.3} s, {} telemetry records", self.records)?,
            None => writeln!(f, "ran to t = {:.3} s, {} telemetry records", self.end_time, self.records)?,
        }
        for p in &self.pumps {
            writeln!(
                f,
                "pump {} ({}): {} cycles, max |position| {} steps, final {} steps, {} clamped ticks",
                p.pump_id, p.name, p.cycles_completed, p.max_abs_position, p.final_position, p.clamped_ticks
            )?;
        }
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Sorted by `(t, pump_id)`.
    pub records: Vec<TelemetryRecord>,
    pub report: ExitReport,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("no plant configured for pump `{0}`")]
    MissingPlant(String),
    #[error("plant `{0}` matches no declared pump")]
    UnknownPlant(String),
    #[error("program runs until stopped; give a duration")]
    UnboundedRun,
    #[error("{0}")]
    InvalidOptions(String),
    #[error("pump {pump_id} at t = {t} s: {source}")]
    Motion { pump_id: u8, t: f64, source: MotionError },
    #[error("pump {pump_id} at t = {t} s: {source}")]
    Plant { pump_id: u8, t: f64, source: PlantError },
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error("pump {pump_id} rejected {opcode} with code {code:#04x}")]
    NackReceived { pump_id: u8, opcode: Opcode, code: u8 },
    #[error("no reply from pump {pump_id} to {opcode}")]
    Timeout { pump_id: u8, opcode: Opcode },
    #[error("serial i/o: {0}")]
    Io(#[from] io::Error),
}

/// Simulated pumps, one independent plant per pump id.
#[derive(Debug, Clone, Default)]
pub struct SimBackend {
    pub plants: BTreeMap<u8, PlantConfig>,
    stop: StopHandle,
}

impl SimBackend {
    pub fn new(plants: BTreeMap<u8, PlantConfig>) -> Self {
        Self { plants, stop: StopHandle::new() }
    }

    /// The same plant behind every declared pump.
    pub fn uniform(program: &GaitProgram, plant: PlantConfig) -> Self {
        Self::new(program.pumps.iter().map(|p| (p.config.pump_id(), plant)).collect())
    }

    /// Matches plant blocks to pumps by name, falling back to `default`.
    pub fn from_plants(program: &GaitProgram, file: &PlantsFile) -> Result<Self, RunError> {
        for name in file.plants.keys() {
            if name != PlantsFile::DEFAULT_NAME && program.pump_by_name(name).is_none() {
                return Err(RunError::UnknownPlant(name.clone()));
            }
        }
        let mut plants = BTreeMap::new();
        for p in &program.pumps {
            let cfg = file.for_pump(&p.name).ok_or_else(|| RunError::MissingPlant(p.name.clone()))?;
            plants.insert(p.config.pump_id(), *cfg);
        }
        Ok(Self::new(plants))
    }

    pub fn stop_handle(&self) -> StopHandle {
        self.stop.clone()
    }
}

pub enum Backend {
    Sim(SimBackend),
    Serial(SerialLink),
}

impl Backend {
    pub fn stop_handle(&self) -> StopHandle {
        match self {
            Backend::Sim(b) => b.stop_handle(),
            Backend::Serial(l) => l.stop_handle(),
        }
    }
}

/// Executes `program`; all pumps share t = 0.
pub fn run(program: &GaitProgram, backend: &Backend, options: &RunOptions) -> Result<RunOutput, RunError> {
    match backend {
        Backend::Sim(b) => run_sim(program, b, options, |_| {}),
        Backend::Serial(l) => run_serial(program, l, options),
    }
}

/// Simulation: ends the current run at its next telemetry block; a no-op
/// when idle. Serial: broadcasts STOP without waiting for replies.
pub fn stop_all(backend: &Backend) -> Result<(), RunError> {
    match backend {
        Backend::Sim(b) => {
            b.stop.stop();
            Ok(())
        }
        Backend::Serial(l) => l.stop_all(),
    }
}

/// Time at tick `k`, snapped to whole nanoseconds so that 350 ticks of
/// 1 ms read as 0.35 s, the same value a pump reports in milliseconds.
fn tick_time(k: u64, tick: f64) -> f64 {
    (k as f64 * tick * 1e9).round() / 1e9
}

/// Whole cycles of `wave` finished by `t`.
fn cycles_done(wave: Option<&crate::waveform::WaveformSpec>, t: f64) -> u64 {
    let Some(w) = wave else { return 0 };
    let n = (t / w.period() * (1.0 + 1e-12)).floor() as u64;
    w.cycles().map_or(n, |c| n.min(u64::from(c)))
}
