//! Isothermal model of a syringe → tube → voxel circuit.
//!
//! Gas quantity is tracked as the product `P·V` (Pa·mL), which is constant
//! for a fixed amount of gas at constant temperature. The circuit is closed:
//! the sum of the two chambers' gas never changes, and withdrawing the
//! plunger past the sealing point pulls both chambers below ambient.

use std::io::{self, Write};

use thiserror::Error;

use crate::error::{ensure, InvariantError};
use crate::kinematics::PumpConfig;
use crate::motion::StepTimeline;

/// Relative tolerance for gas conservation per step.
pub const CONSERVATION_TOL: f64 = 1e-9;

const MAX_SUBSTEP_HALVINGS: u32 = 24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("plunger at {travel_mm:.3} mm left the travel range [0, {max_travel_mm:.3}] mm")]
    PlungerLimit { travel_mm: f64, max_travel_mm: f64 },
    #[error("non-physical state: {0}")]
    NonPhysical(String),
}

/// A plant error with the simulation time where it occurred.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("t = {t:.6} s: {source}")]
pub struct SimError {
    pub t: f64,
    pub source: PlantError,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantConfig {
    ambient_pressure: f64,
    syringe_initial_gas_volume: f64,
    voxel_rest_volume: f64,
    voxel_compliance: f64,
    tube_resistance: f64,
    tube_volume: f64,
    seal_volume: f64,
}

impl Default for PlantConfig {
    /// Placeholder circuit: 30 mL of air in the barrel, a 10 mL voxel that
    /// grows 5 mL per 100 kPa, a short tube. Measure real hardware.
    fn default() -> Self {
        Self::new(101_325.0, 30.0, 10.0, 5e-5, 100.0, 1.0).expect("default plant")
    }
}

impl PlantConfig {
    /// Pressures in Pa, volumes in mL, compliance in mL/Pa and tube
    /// resistance in Pa·s/mL. A zero resistance equalizes instantly.
    pub fn new(
        ambient_pressure_pa: f64,
        syringe_initial_gas_volume_ml: f64,
        voxel_rest_volume_ml: f64,
        voxel_compliance_ml_per_pa: f64,
        tube_resistance: f64,
        tube_volume_ml: f64,
    ) -> Result<Self, InvariantError> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let non_neg = |v: f64| v >= 0.0 && v.is_finite();
        ensure(pos(ambient_pressure_pa), "ambient_pa", "ambient_pa > 0", ambient_pressure_pa)?;
        ensure(
            pos(syringe_initial_gas_volume_ml),
            "syringe_gas_ml",
            "syringe_gas_ml > 0",
            syringe_initial_gas_volume_ml,
        )?;
        ensure(pos(voxel_rest_volume_ml), "voxel_ml", "voxel_ml > 0", voxel_rest_volume_ml)?;
        ensure(
            non_neg(voxel_compliance_ml_per_pa),
            "compliance_ml_per_pa",
            "compliance_ml_per_pa >= 0",
            voxel_compliance_ml_per_pa,
        )?;
        ensure(non_neg(tube_resistance), "resistance_pa_s_per_ml", "resistance_pa_s_per_ml >= 0", tube_resistance)?;
        ensure(pos(tube_volume_ml), "tube_ml", "tube_ml > 0", tube_volume_ml)?;
        Ok(Self {
            ambient_pressure: ambient_pressure_pa,
            syringe_initial_gas_volume: syringe_initial_gas_volume_ml,
            voxel_rest_volume: voxel_rest_volume_ml,
            voxel_compliance: voxel_compliance_ml_per_pa,
            tube_resistance,
            tube_volume: tube_volume_ml,
            seal_volume: 0.0,
        })
    }

    /// Displaced volume (mL from the pump's home) at which the circuit was
    /// closed at ambient pressure. Moving below it pulls a vacuum.
    pub fn with_seal_volume(mut self, seal_volume_ml: f64) -> Result<Self, InvariantError> {
        ensure(seal_volume_ml >= 0.0 && seal_volume_ml.is_finite(), "seal_ml", "seal_ml >= 0", seal_volume_ml)?;
        self.seal_volume = seal_volume_ml;
        Ok(self)
    }

    pub fn ambient_pressure(&self) -> f64 {
        self.ambient_pressure
    }

    pub fn syringe_initial_gas_volume(&self) -> f64 {
        self.syringe_initial_gas_volume
    }

    pub fn voxel_rest_volume(&self) -> f64 {
        self.voxel_rest_volume
    }

    pub fn voxel_compliance(&self) -> f64 {
        self.voxel_compliance
    }

    pub fn tube_resistance(&self) -> f64 {
        self.tube_resistance
    }

    pub fn tube_volume(&self) -> f64 {
        self.tube_volume
    }

    pub fn seal_volume(&self) -> f64 {
        self.seal_volume
    }

    /// Voxel-side volume at ambient pressure (voxel plus tube).
    fn voxel_base_volume(&self) -> f64 {
        self.voxel_rest_volume + self.tube_volume
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub t: f64,
    /// Plunger travel in mm from the sealing position, push-positive.
    pub plunger_travel: f64,
    pub syringe_pressure: f64,
    pub syringe_volume: f64,
    pub voxel_pressure: f64,
    pub voxel_volume: f64,
    /// `P·V` of the syringe chamber, Pa·mL.
    pub syringe_gas: f64,
    pub voxel_gas: f64,
}

impl PlantState {
    pub fn total_gas(&self) -> f64 {
        self.syringe_gas + self.voxel_gas
    }
}

/// Both chambers at ambient pressure.
pub fn init_plant(config: &PlantConfig) -> PlantState {
    let p = config.ambient_pressure;
    let syringe_volume = config.syringe_initial_gas_volume;
    let voxel_volume = config.voxel_base_volume();
    PlantState {
        t: 0.0,
        plunger_travel: 0.0,
        syringe_pressure: p,
        syringe_volume,
        voxel_pressure: p,
        voxel_volume,
        syringe_gas: p * syringe_volume,
        voxel_gas: p * voxel_volume,
    }
}

/// Positive root of `P·(base + C·(P − ambient)) = gas`.
///
/// Uses the cancellation-free form of the quadratic formula on whichever
/// side is stable; reduces to `gas / base` for a rigid chamber.
pub fn pressure_for_gas(gas: f64, base_volume: f64, compliance: f64, ambient: f64) -> Result<f64, PlantError> {
    if !(gas > 0.0 && gas.is_finite()) {
        return Err(PlantError::NonPhysical(format!("gas content {gas} Pa·mL is not positive")));
    }
    let b = base_volume - compliance * ambient;
    let disc = (b * b + 4.0 * compliance * gas).sqrt();
    let p = if b >= 0.0 { 2.0 * gas / (b + disc) } else { (disc - b) / (2.0 * compliance) };
    if p > 0.0 && p.is_finite() {
        Ok(p)
    } else {
        Err(PlantError::NonPhysical(format!("no positive pressure for gas {gas} Pa·mL")))
    }
}

fn voxel_volume_at(config: &PlantConfig, pressure: f64) -> f64 {
    config.voxel_base_volume() + config.voxel_compliance * (pressure - config.ambient_pressure)
}

/// Equalizes both chambers to one pressure, conserving total gas.
pub fn equilibrate(state: &PlantState, config: &PlantConfig) -> Result<PlantState, PlantError> {
    let total = state.total_gas();
    let p = pressure_for_gas(
        total,
        state.syringe_volume + config.voxel_base_volume(),
        config.voxel_compliance,
        config.ambient_pressure,
    )?;
    let syringe_gas = p * state.syringe_volume;
    Ok(PlantState {
        syringe_pressure: p,
        voxel_pressure: p,
        voxel_volume: voxel_volume_at(config, p),
        syringe_gas,
        voxel_gas: total - syringe_gas,
        ..*state
    })
}

/// Advances the circuit by `dt` after the plunger moved `motor_steps`.
pub fn step_plant(
    state: &PlantState,
    config: &PlantConfig,
    pump: &PumpConfig,
    motor_steps: i64,
    dt: f64,
) -> Result<PlantState, PlantError> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(PlantError::NonPhysical(format!("dt {dt} must be positive")));
    }
    let syringe = pump.syringe();
    let steps = pump.drive().normalize(motor_steps);
    let delta_travel = steps as f64 / pump.drive().steps_per_mm();
    let plunger_travel = state.plunger_travel + delta_travel;

    let seal_travel = syringe.travel_to_volume(1.0).recip() * config.seal_volume;
    let absolute = pump.home_travel() + seal_travel + plunger_travel;
    if absolute < -1e-9 || absolute > syringe.max_travel() + 1e-9 {
        return Err(PlantError::PlungerLimit { travel_mm: absolute, max_travel_mm: syringe.max_travel() });
    }
    let syringe_volume = state.syringe_volume - syringe.travel_to_volume(delta_travel);
    if syringe_volume.is_nan() || syringe_volume <= 0.0 {
        return Err(PlantError::NonPhysical(format!("syringe gas volume {syringe_volume} mL is not positive")));
    }

    let moved = PlantState {
        t: state.t + dt,
        plunger_travel,
        syringe_volume,
        syringe_pressure: if steps == 0 { state.syringe_pressure } else { state.syringe_gas / syringe_volume },
        ..*state
    };
    if steps == 0 && moved.syringe_pressure == moved.voxel_pressure {
        return Ok(moved);
    }

    if config.tube_resistance == 0.0 {
        return equilibrate(&moved, config);
    }
    exchange(&moved, config, dt)
}

/// Donor-cell gas exchange through the tube over `dt`, halving the substep
/// until no substep overshoots equilibrium and gas is conserved.
fn exchange(state: &PlantState, config: &PlantConfig, dt: f64) -> Result<PlantState, PlantError> {
    let total = state.total_gas();
    for halvings in 0..=MAX_SUBSTEP_HALVINGS {
        let n = 1u32 << halvings;
        if let Some((syringe_gas, voxel_gas)) = try_exchange(state, config, dt / f64::from(n), n)? {
            if ((syringe_gas + voxel_gas) - total).abs() > CONSERVATION_TOL * total {
                continue;
            }
            let voxel_pressure = pressure_for_gas(
                voxel_gas,
                config.voxel_base_volume(),
                config.voxel_compliance,
                config.ambient_pressure,
            )?;
            return Ok(PlantState {
                syringe_gas,
                voxel_gas,
                syringe_pressure: syringe_gas / state.syringe_volume,
                voxel_pressure,
                voxel_volume: voxel_volume_at(config, voxel_pressure),
                ..*state
            });
        }
    }
    Err(PlantError::NonPhysical(format!("gas exchange unstable even with {} substeps", 1u32 << MAX_SUBSTEP_HALVINGS)))
}

/// `None` when a substep of length `h` overshoots.
fn try_exchange(
    state: &PlantState,
    config: &PlantConfig,
    h: f64,
    substeps: u32,
) -> Result<Option<(f64, f64)>, PlantError> {
    let base = config.voxel_base_volume();
    let (c, ambient, r) = (config.voxel_compliance, config.ambient_pressure, config.tube_resistance);
    let mut syringe_gas = state.syringe_gas;
    let mut voxel_gas = state.voxel_gas;
    let mut dp = state.syringe_pressure - state.voxel_pressure;
    for _ in 0..substeps {
        if dp == 0.0 {
            break;
        }
        let p_syringe = syringe_gas / state.syringe_volume;
        let upstream = if dp > 0.0 { p_syringe } else { p_syringe - dp };
        let transfer = dp / r * h * upstream;
        let (s, v) = (syringe_gas - transfer, voxel_gas + transfer);
        if !(s > 0.0 && v > 0.0) {
            return Ok(None);
        }
        let next_dp = s / state.syringe_volume - pressure_for_gas(v, base, c, ambient)?;
        if next_dp * dp < 0.0 || next_dp.abs() > dp.abs() {
            return Ok(None);
        }
        syringe_gas = s;
        voxel_gas = v;
        dp = next_dp;
    }
    Ok(Some((syringe_gas, voxel_gas)))
}

/// Runs the circuit under a timeline, one state per `dt` starting with the
/// initial state.
pub fn simulate(
    config: &PlantConfig,
    pump: &PumpConfig,
    timeline: &StepTimeline,
    dt: f64,
) -> Result<Vec<PlantState>, SimError> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(SimError { t: 0.0, source: PlantError::NonPhysical(format!("dt {dt} must be positive")) });
    }
    let windows = (timeline.duration / dt - 1e-9).ceil().max(0.0) as usize;
    let mut counts = vec![0i64; windows];
    for p in &timeline.pulses {
        let idx = ((p.t / dt).floor() as usize).min(windows.saturating_sub(1));
        if let Some(c) = counts.get_mut(idx) {
            *c += i64::from(p.direction);
        }
    }

    let mut states = Vec::with_capacity(windows + 1);
    let mut state = init_plant(config);
    states.push(state);
    for (j, &steps) in counts.iter().enumerate() {
        state = step_plant(&state, config, pump, steps, dt).map_err(|source| SimError { t: j as f64 * dt, source })?;
        state.t = (j + 1) as f64 * dt;
        states.push(state);
    }
    Ok(states)
}

/// CSV with header `t_s,travel_mm,p_syringe_pa,p_voxel_pa,v_voxel_ml`.
pub fn write_trajectory_csv<W: Write>(states: &[PlantState], mut out: W) -> io::Result<()> {
    writeln!(out, "t_s,travel_mm,p_syringe_pa,p_voxel_pa,v_voxel_ml")?;
    for s in states {
        writeln!(
            out,
            "{:.6},{:.6},{:.3},{:.3},{:.6}",
            s.t, s.plunger_travel, s.syringe_pressure, s.voxel_pressure, s.voxel_volume
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{DriveSpec, SyringeSpec};
    use crate::motion::{plan_move, track};
    use crate::waveform::{Shape, WaveformSpec};
    use approx::assert_relative_eq;

    const ATM: f64 = 101_325.0;

    /// 26.7 mm bore, 100 mm travel (56 mL), homed 20 mm in so that 10 mL
    /// (17.9 mm) can be withdrawn from the sealing point.
    fn pump() -> PumpConfig {
        let syringe = SyringeSpec::new(26.7, 100.0, 0.0).unwrap();
        let drive = DriveSpec::new(8.0, 200, 16, 40_000.0, 400_000.0, false).unwrap();
        PumpConfig::new(0, syringe, drive, 20.0).unwrap()
    }

    fn rigid_60ml(resistance: f64) -> PlantConfig {
        PlantConfig::new(ATM, 40.0, 19.0, 0.0, resistance, 1.0).unwrap()
    }

    /// Exact step count for a volume on this pump; the test expects
    /// pressures for the quantized volume.
    fn steps_for(pump: &PumpConfig, ml: f64) -> (i64, f64) {
        let steps = pump.volume_to_steps(ml).unwrap();
        (steps, pump.steps_to_volume(steps))
    }

    #[test]
    fn init_examples() {
        let s = init_plant(&PlantConfig::new(ATM, 40.0, 19.0, 0.0, 0.0, 1.0).unwrap());
        assert_eq!(s.syringe_gas, 4.053e6);
        assert_eq!(s.voxel_volume, 20.0);
        assert_eq!(s.voxel_pressure - ATM, 0.0);
        let compliant = init_plant(&PlantConfig::new(ATM, 40.0, 19.0, 1e-3, 5.0, 1.0).unwrap());
        assert_eq!(compliant.voxel_volume, 20.0);
    }

    #[test]
    fn boyle_push_and_pull() {
        let pump = pump();
        let cfg = rigid_60ml(0.0);
        let s0 = init_plant(&cfg);
        let (push, pushed_ml) = steps_for(&pump, 10.0);
        let pushed = step_plant(&s0, &cfg, &pump, push, 1e-3).unwrap();
        assert_relative_eq!(pushed.voxel_pressure, ATM * 60.0 / (60.0 - pushed_ml), max_relative = 1e-12);
        assert_relative_eq!(pushed.voxel_pressure, 121_590.0, max_relative = 1e-3);

        let pulled = step_plant(&s0, &cfg, &pump, -push, 1e-3).unwrap();
        assert_relative_eq!(pulled.voxel_pressure, ATM * 60.0 / (60.0 + pushed_ml), max_relative = 1e-12);
        assert_relative_eq!(pulled.voxel_pressure, 86_850.0, max_relative = 1e-3);
        assert!(pulled.syringe_pressure < ATM);
    }

    #[test]
    fn compliant_equilibrium_matches_bisection() {
        let pump = pump();
        let cfg = PlantConfig::new(ATM, 40.0, 19.0, 1e-3, 0.0, 1.0).unwrap();
        let (push, pushed_ml) = steps_for(&pump, 10.0);
        let s = step_plant(&init_plant(&cfg), &cfg, &pump, push, 1e-3).unwrap();
        let balance = |p: f64| p * (60.0 - pushed_ml + 1e-3 * (p - ATM)) - ATM * 60.0;
        let (mut lo, mut hi) = (1.0, 1e7);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if balance(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert_relative_eq!(s.voxel_pressure, 0.5 * (lo + hi), max_relative = 1e-9);
    }

    #[test]
    fn plunger_limit_reported() {
        let pump = pump();
        let cfg = rigid_60ml(0.0);
        // home is 20 mm in: 21 mm of withdrawal leaves the barrel
        let steps = -(21.0 * pump.drive().steps_per_mm()) as i64;
        let err = step_plant(&init_plant(&cfg), &cfg, &pump, steps, 1e-3).unwrap_err();
        assert!(matches!(err, PlantError::PlungerLimit { .. }));
    }

    #[test]
    fn crushing_the_syringe_is_non_physical() {
        let pump = pump();
        let cfg = PlantConfig::new(ATM, 5.0, 19.0, 0.0, 0.0, 1.0).unwrap();
        let (push, _) = steps_for(&pump, 6.0);
        let err = step_plant(&init_plant(&cfg), &cfg, &pump, push, 1e-3).unwrap_err();
        assert!(matches!(err, PlantError::NonPhysical(_)));
    }

    #[test]
    fn pressure_root_rejects_empty_chamber() {
        assert!(pressure_for_gas(0.0, 10.0, 0.0, ATM).is_err());
        assert!(pressure_for_gas(-1.0, 10.0, 1e-3, ATM).is_err());
        // C·ambient > base takes the other branch of the formula
        let p = pressure_for_gas(ATM * 10.0, 10.0, 1e-3, ATM).unwrap();
        assert_relative_eq!(p, ATM, max_relative = 1e-12);
    }

    #[test]
    fn empty_timeline_keeps_initial_state() {
        let pump = pump();
        let cfg = PlantConfig::default();
        let states = simulate(&cfg, &pump, &StepTimeline::empty(1e-3, 0.5), 1e-3).unwrap();
        assert_eq!(states.len(), 501);
        let s0 = states[0];
        for s in &states {
            assert_eq!(PlantState { t: 0.0, ..*s }, s0);
        }
    }

    #[test]
    fn resistive_relaxation_is_monotone() {
        let pump = pump();
        let cfg = PlantConfig::new(ATM, 40.0, 19.0, 2e-4, 2000.0, 1.0).unwrap();
        let drive = pump.drive();
        let mut tl = plan_move(drive, 0, pump.volume_to_steps(5.0).unwrap());
        tl.duration = 3.0;
        let states = simulate(&cfg, &pump, &tl, 1e-3).unwrap();
        let move_end = (plan_move(drive, 0, pump.volume_to_steps(5.0).unwrap()).duration / 1e-3) as usize + 1;
        let tail = &states[move_end..];
        for w in tail.windows(2) {
            assert!(w[1].voxel_pressure >= w[0].voxel_pressure);
            assert!(w[1].syringe_pressure <= w[0].syringe_pressure);
        }
        let last = tail.last().unwrap();
        assert!((last.syringe_pressure - last.voxel_pressure).abs() < 1e-3 * ATM);
        let total = states[0].total_gas();
        for s in &states {
            assert!((s.total_gas() - total).abs() <= CONSERVATION_TOL * total);
        }
    }

    #[test]
    fn stiff_tube_forces_substeps_but_conserves() {
        let pump = pump();
        // time constant ~ R * V / P = 0.01 * 20 / 1e5 s, far below dt
        let cfg = PlantConfig::new(ATM, 40.0, 19.0, 0.0, 0.01, 1.0).unwrap();
        let (push, _) = steps_for(&pump, 5.0);
        let s = step_plant(&init_plant(&cfg), &cfg, &pump, push, 1e-3).unwrap();
        assert!((s.total_gas() - init_plant(&cfg).total_gas()).abs() <= CONSERVATION_TOL * s.total_gas());
        assert!(s.syringe_pressure >= s.voxel_pressure);
    }

    #[test]
    fn sine_cycle_returns_to_ambient() {
        let pump = pump();
        let cfg = rigid_60ml(0.0);
        let w = WaveformSpec::builder(Shape::Sine, 2.0, 10.0).build().unwrap();
        let tl = track(&pump, &w, 1e-3, 2.0).unwrap();
        let states = simulate(&cfg, &pump, &tl, 1e-3).unwrap();
        assert_relative_eq!(states.last().unwrap().voxel_pressure, ATM, max_relative = 1e-6);
        let max = states.iter().map(|s| s.voxel_pressure).fold(0.0, f64::max);
        // 60 mL of gas squeezed by the 10 mL peak
        assert_relative_eq!(max, 1.2 * ATM, max_relative = 1e-3);
    }

    #[test]
    fn larger_compliance_lowers_overpressure() {
        let pump = pump();
        let (push, _) = steps_for(&pump, 8.0);
        let mut last = f64::INFINITY;
        for c in [0.0, 1e-5, 1e-4, 1e-3] {
            let cfg = PlantConfig::new(ATM, 40.0, 19.0, c, 0.0, 1.0).unwrap();
            let p = step_plant(&init_plant(&cfg), &cfg, &pump, push, 1e-3).unwrap().voxel_pressure;
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn seal_volume_shifts_limits() {
        let syringe = SyringeSpec::new(26.7, 100.0, 0.0).unwrap();
        let drive = DriveSpec::new(8.0, 200, 16, 40_000.0, 400_000.0, false).unwrap();
        let homed_at_end = PumpConfig::new(0, syringe, drive, 0.0).unwrap();
        let (pull, _) = steps_for(&homed_at_end, -5.0);
        let unsealed = rigid_60ml(0.0);
        assert!(step_plant(&init_plant(&unsealed), &unsealed, &homed_at_end, pull, 1e-3).is_err());
        let sealed = unsealed.with_seal_volume(10.0).unwrap();
        let s = step_plant(&init_plant(&sealed), &sealed, &homed_at_end, pull, 1e-3).unwrap();
        assert!(s.voxel_pressure < ATM);
    }

    #[test]
    fn trajectory_csv_header() {
        let mut buf = Vec::new();
        write_trajectory_csv(&[init_plant(&PlantConfig::default())], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t_s,travel_mm,p_syringe_pa,p_voxel_pa,v_voxel_ml\n0.000000,0.000000,101325.000"));
    }
}
