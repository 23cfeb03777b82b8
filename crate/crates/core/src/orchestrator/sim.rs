//! Lockstep simulation: every pump advances one telemetry interval at a
//! time, possibly in parallel, and rows are emitted in `(t, pump_id)`
//! order. Pumps never read each other's state, so thread count cannot
//! change the output.

use rayon::prelude::*;

use super::{
    cycles_done, tick_time, ExitReport, PumpSummary, RunError, RunOptions, RunOutput, SimBackend, TelemetryRecord,
};
use crate::kinematics::PumpConfig;
use crate::motion::Tracker;
use crate::plant::{equilibrate, init_plant, step_plant, PlantConfig, PlantError, PlantState};
use crate::protocol::GaitProgram;
use crate::waveform::{tick_count, WaveformSpec};

struct PumpSim {
    id: u8,
    name: String,
    config: PumpConfig,
    plant: PlantConfig,
    wave: Option<WaveformSpec>,
    tracker: Option<Tracker>,
    state: PlantState,
    /// Push-positive steps from home.
    position: i64,
    max_abs: i64,
    tick: f64,
    k: u64,
}

impl PumpSim {
    fn new(
        name: &str,
        config: PumpConfig,
        plant: PlantConfig,
        wave: Option<WaveformSpec>,
        tick: f64,
    ) -> Result<Self, RunError> {
        let id = config.pump_id();
        let tracker = wave
            .as_ref()
            .map(|w| Tracker::new(&config, w, tick))
            .transpose()
            .map_err(|source| RunError::Motion { pump_id: id, t: 0.0, source })?;
        let position = tracker.as_ref().map_or(0, |t| t.state().position);

        // The circuit is closed at the seal point; the pump then moves to
        // its t = 0 setpoint and the pressures settle before the start.
        let plant_err = |source| RunError::Plant { pump_id: id, t: 0.0, source };
        let seal_steps = config
            .volume_to_steps(plant.seal_volume())
            .map_err(|e| plant_err(PlantError::NonPhysical(e.to_string())))?;
        let mut state = init_plant(&plant);
        let delta = position - seal_steps;
        if delta != 0 {
            state = step_plant(&state, &plant, &config, config.drive().normalize(delta), tick).map_err(plant_err)?;
            state = equilibrate(&state, &plant).map_err(plant_err)?;
            state.t = 0.0;
        }
        let motor = config.drive().normalize(position);
        Ok(Self {
            id,
            name: name.to_string(),
            config,
            plant,
            wave,
            tracker,
            state,
            position,
            max_abs: motor.abs(),
            tick,
            k: 0,
        })
    }

    fn record(&self) -> TelemetryRecord {
        TelemetryRecord {
            t: tick_time(self.k, self.tick),
            pump_id: self.id,
            commanded_volume: self.tracker.as_ref().map_or(0.0, |t| t.sampler().volume_at(self.k as i64)),
            position: self.config.drive().normalize(self.position),
            voxel_pressure: Some(self.state.voxel_pressure),
        }
    }

    fn advance(&mut self, ticks: u64) -> Result<(), RunError> {
        let drive = *self.config.drive();
        for _ in 0..ticks {
            let steps = match self.tracker.as_mut() {
                Some(t) => t.advance().steps,
                None => 0,
            };
            let t0 = tick_time(self.k, self.tick);
            self.state = step_plant(&self.state, &self.plant, &self.config, drive.normalize(steps), self.tick)
                .map_err(|source| RunError::Plant { pump_id: self.id, t: t0, source })?;
            self.k += 1;
            self.state.t = self.k as f64 * self.tick;
            self.position += steps;
            self.max_abs = self.max_abs.max(self.position.abs());
        }
        Ok(())
    }

    fn summary(&self) -> PumpSummary {
        PumpSummary {
            pump_id: self.id,
            name: self.name.clone(),
            cycles_completed: cycles_done(self.wave.as_ref(), tick_time(self.k, self.tick)),
            max_abs_position: self.max_abs,
            final_position: self.config.drive().normalize(self.position),
            clamped_ticks: self.tracker.as_ref().map_or(0, Tracker::clamped_ticks),
        }
    }
}

/// Simulates `program`, calling `observer` with each telemetry row (one
/// record per pump) as it is produced.
pub fn run_sim(
    program: &GaitProgram,
    backend: &SimBackend,
    options: &RunOptions,
    mut observer: impl FnMut(&[TelemetryRecord]),
) -> Result<RunOutput, RunError> {
    backend.stop.reset();
    let per_record = options.ticks_per_record()?;
    let horizon = options.horizon(program)?;
    let total = tick_count(horizon, options.tick);

    let mut pumps = Vec::with_capacity(program.pumps.len());
    for decl in program.pumps_by_id() {
        let id = decl.config.pump_id();
        let plant = *backend.plants.get(&id).ok_or_else(|| RunError::MissingPlant(decl.name.clone()))?;
        pumps.push(PumpSim::new(&decl.name, decl.config, plant, program.wave(id).copied(), options.tick)?);
    }

    let rows = (total / per_record + 1) as usize;
    let mut records = Vec::with_capacity(rows * pumps.len());
    let mut emit = |pumps: &[PumpSim], records: &mut Vec<TelemetryRecord>| {
        let start = records.len();
        records.extend(pumps.iter().map(PumpSim::record));
        observer(&records[start..]);
    };
    emit(&pumps, &mut records);

    let mut stopped_at = None;
    let mut k = 0u64;
    while k < total {
        if backend.stop.is_stopped() {
            stopped_at = Some(tick_time(k, options.tick));
            break;
        }
        let n = per_record.min(total - k);
        let results: Vec<Result<(), RunError>> = if options.parallel && pumps.len() > 1 {
            pumps.par_iter_mut().map(|p| p.advance(n)).collect()
        } else {
            pumps.iter_mut().map(|p| p.advance(n)).collect()
        };
        // lowest pump id wins when several fail in the same block
        results.into_iter().collect::<Result<Vec<()>, RunError>>()?;
        k += n;
        if k.is_multiple_of(per_record) {
            emit(&pumps, &mut records);
        }
    }

    let report = ExitReport {
        pumps: pumps.iter().map(PumpSim::summary).collect(),
        end_time: tick_time(k, options.tick),
        stopped_at,
        records: records.len(),
        errors: Vec::new(),
    };
    Ok(RunOutput { records, report })
}
