//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Built without the libtest harness so the lines always show and
//! the timed criteria run one at a time.
//!
//! `UPDATE_GOLDEN=1` rewrites the gait golden files instead of comparing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pumpctl_core::kinematics::MICROSTEP_FACTORS;
use pumpctl_core::motion::check_trackable;
use pumpctl_core::orchestrator::{run_sim, RunOptions, SimBackend};
use pumpctl_core::plant::{init_plant, step_plant, PlantState};
use pumpctl_core::protocol::{
    compile_gait, crc16_ccitt_false, decode_frame, dump_frames, flatten, parse_gait, Decoded, Decoder, Frame, Opcode,
};
use pumpctl_core::{
    plan_move, simulate, track, DriveSpec, PlantConfig, PumpConfig, Shape, SyringeSpec, Tracker, WaveformSpec,
};

const ATM: f64 = 101_325.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn secs(d: Duration) -> String {
    format!("{:.3} s", d.as_secs_f64())
}

fn random_pump(r: &mut ChaCha8Rng) -> PumpConfig {
    let bore = r.gen_range(3.0..35.0);
    let travel = r.gen_range(40.0..150.0);
    let syringe = SyringeSpec::new(bore, travel, r.gen_range(0.0..1.0)).unwrap();
    let pitch = [1.0, 2.0, 4.0, 8.0][r.gen_range(0..4)];
    let steps = [200, 400][r.gen_range(0..2)];
    let micro = MICROSTEP_FACTORS[r.gen_range(0..MICROSTEP_FACTORS.len())];
    let rate = r.gen_range(5_000.0..40_000.0);
    let drive = DriveSpec::new(pitch, steps, micro, rate, rate * r.gen_range(5.0..20.0), r.gen_bool(0.3)).unwrap();
    PumpConfig::new(r.gen_range(0..=254), syringe, drive, r.gen_range(0.0..3.0)).unwrap()
}

// 1. volume -> steps -> volume stays within one microstep.
fn kinematics_round_trip() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..100_000 {
        let cfg = random_pump(&mut r);
        let cap = cfg.syringe().capacity_ml();
        let dv = r.gen_range(-cap..=cap);
        let steps = cfg.volume_to_steps(dv).unwrap();
        let err = (cfg.steps_to_volume(steps) - dv).abs() / cfg.microstep_volume();
        worst = worst.max(err);
        if err > 1.0 {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && elapsed < Duration::from_secs(5),
        format!("1e5 pairs, worst error {worst:.3} microsteps, {failures} over, {}", secs(elapsed)),
    )
}

fn random_feasible(r: &mut ChaCha8Rng) -> (PumpConfig, WaveformSpec) {
    loop {
        let cfg = random_pump(r);
        let shape = [Shape::Sine, Shape::Trapezoid, Shape::Square][r.gen_range(0..3)];
        // periods travel as whole milliseconds
        let period = f64::from(r.gen_range(200u32..=2000)) / 1000.0;
        let usable = cfg.syringe().capacity_ml() * 0.8;
        let amplitude = r.gen_range(0.05..1.0) * usable;
        let duty: f64 = r.gen_range(0.1..0.9);
        let wave = WaveformSpec::builder(shape, period, amplitude)
            .duty(duty)
            .phase(r.gen_range(0.0..1.0))
            .offset(r.gen_range(0.0..1.0) * (usable - amplitude))
            .ramp(r.gen_range(0.1..1.0) * duty.min(1.0 - duty))
            .build()
            .unwrap();
        if check_trackable(&cfg, &wave, 1e-3).is_ok() {
            return (cfg, wave);
        }
    }
}

// 2. Position after 1000 periods equals position after 0.
fn zero_drift() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut drifted = 0;
    let mut shapes = [0usize; 3];
    for _ in 0..100 {
        let (cfg, wave) = random_feasible(&mut r);
        shapes[[Shape::Sine, Shape::Trapezoid, Shape::Square].iter().position(|&s| s == wave.shape()).unwrap()] += 1;
        let mut t = Tracker::new(&cfg, &wave, 1e-3).unwrap();
        let n = t.sampler().ticks_per_period().expect("millisecond periods are grid aligned");
        let p0 = t.state().position;
        for _ in 0..n * 1000 {
            t.advance();
        }
        if t.state().position != p0 {
            drifted += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        drifted == 0 && elapsed < Duration::from_secs(60),
        format!(
            "100 pairs ({} sine, {} trapezoid, {} square) x 1000 periods, {drifted} drifted, {}",
            shapes[0],
            shapes[1],
            shapes[2],
            secs(elapsed)
        ),
    )
}

fn settle(mut s: PlantState, plant: &PlantConfig, pump: &PumpConfig, seconds: f64) -> PlantState {
    for _ in 0..(seconds * 1000.0) as usize {
        s = step_plant(&s, plant, pump, 0, 1e-3).unwrap();
    }
    s
}

// 3. Boyle: 60 mL rigid system, 10 mL pull and push.
fn bidirectional() -> Outcome {
    let pump = PumpConfig::example(0);
    let spml = pump.volume_to_steps(10.0).unwrap();
    let mut detail = String::new();
    let mut pass = true;
    for resistance in [0.0, 2_000.0] {
        for (seal, from, to, expect) in [(10.0, spml, 0, 86_850.0), (0.0, 0, spml, 121_590.0)] {
            let plant =
                PlantConfig::new(ATM, 40.0, 19.0, 0.0, resistance, 1.0).unwrap().with_seal_volume(seal).unwrap();
            let tl = plan_move(pump.drive(), from, to);
            let states = simulate(&plant, &pump, &tl, 1e-3).unwrap();
            let end = settle(*states.last().unwrap(), &plant, &pump, 5.0);
            for p in [end.syringe_pressure, end.voxel_pressure] {
                let rel = (p - expect).abs() / expect;
                pass &= rel <= 1e-3;
                let _ = write!(detail, "{p:.1}/");
            }
            detail.pop();
            let _ = write!(detail, " vs {expect} (R={resistance}); ");
        }
    }
    outcome(pass, detail.trim_end_matches("; ").to_string())
}

// 4. Total P·V constant along simulated trajectories.
fn conservation() -> Outcome {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    let mut states = 0usize;
    for i in 0..60 {
        let pump = PumpConfig::example(0);
        let shape = [Shape::Sine, Shape::Trapezoid, Shape::Square][i % 3];
        let amp = r.gen_range(1.0..15.0);
        let wave = WaveformSpec::builder(shape, r.gen_range(1.0..4.0), amp)
            .duty(r.gen_range(0.2..0.8))
            .phase(r.gen_range(0.0..1.0))
            .build()
            .unwrap();
        let compliance = if r.gen_bool(0.5) { 0.0 } else { r.gen_range(1e-6..2e-4) };
        let resistance = if i % 4 == 0 { 0.0 } else { r.gen_range(10.0..5_000.0) };
        let plant =
            PlantConfig::new(ATM, amp + r.gen_range(5.0..40.0), r.gen_range(1.0..30.0), compliance, resistance, 0.5)
                .unwrap();
        let tl = match track(&pump, &wave, 1e-3, 6.0) {
            Ok(tl) => tl,
            Err(_) => continue,
        };
        // the timeline starts at the wave's t = 0 setpoint: seal there
        let plant = plant.with_seal_volume(pump.steps_to_volume(tl.origin)).unwrap();
        let traj = simulate(&plant, &pump, &tl, 1e-3).unwrap();
        let g0 = traj[0].total_gas();
        for s in &traj {
            worst = worst.max((s.total_gas() - g0).abs() / g0);
        }
        states += traj.len();
    }
    outcome(worst <= 1e-9, format!("{states} states, worst relative drift {worst:.2e}"))
}

/// Independent root of `P·(base + C·(P − ambient)) = gas` by bisection.
fn bisect(gas: f64, base: f64, c: f64, ambient: f64) -> f64 {
    let f = |p: f64| p * (base + c * (p - ambient)) - gas;
    let (mut lo, mut hi) = (0.0, ambient);
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// 5. Compliant voxel equilibrium against bisection.
fn compliant_equilibrium() -> Outcome {
    let mut r = rng(5);
    let pump = PumpConfig::example(0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let syringe_gas = r.gen_range(15.0..60.0);
        let voxel = r.gen_range(1.0..40.0);
        let tube = r.gen_range(0.1..2.0);
        let c = 10f64.powf(r.gen_range(-7.0..-3.5));
        let dv = r.gen_range(-10.0..10.0);
        let plant = PlantConfig::new(ATM, syringe_gas, voxel, c, 0.0, tube).unwrap().with_seal_volume(10.0).unwrap();
        let steps = pump.volume_to_steps(dv).unwrap();
        let s = step_plant(&init_plant(&plant), &plant, &pump, steps, 1e-3).unwrap();
        let moved = pump.steps_to_volume(steps);
        let gas = ATM * (syringe_gas + voxel + tube);
        let oracle = bisect(gas, syringe_gas - moved + voxel + tube, c, ATM);
        worst = worst.max((s.voxel_pressure - oracle).abs() / oracle);
    }
    outcome(worst <= 1e-9, format!("1000 cases, worst relative error {worst:.2e}"))
}

// 6. Phases 0, 1/3, 2/3 are T/3 time rotations.
fn phase_rotation() -> Outcome {
    let program = parse_gait(
        "pump a {}\npump b {}\npump c {}\n\
         wave a sine period=3 amplitude_ml=10\n\
         wave b sine period=3 amplitude_ml=10 phase=0.3333333333333333\n\
         wave c sine period=3 amplitude_ml=10 phase=0.6666666666666666\n\
         run 9s\n",
    )
    .unwrap();
    let rigid = PlantConfig::new(ATM, 40.0, 19.0, 0.0, 0.0, 1.0).unwrap();
    let out = run_sim(&program, &SimBackend::uniform(&program, rigid), &RunOptions::default(), |_| {}).unwrap();
    let rows = |id: u8| out.records.iter().filter(|r| r.pump_id == id).copied().collect::<Vec<_>>();
    let a = rows(0);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    // T/3 = 1 s = 100 rows at 100 Hz
    for (id, shift) in [(1u8, 100usize), (2, 200)] {
        let other = rows(id);
        for j in 0..other.len() - shift {
            let (x, y) = (&other[j], &a[j + shift]);
            let rel = |p: f64, q: f64| if p == q { 0.0 } else { (p - q).abs() / p.abs().max(q.abs()) };
            worst = worst
                .max(rel(x.position as f64, y.position as f64))
                .max(rel(x.voxel_pressure.unwrap(), y.voxel_pressure.unwrap()))
                .max(rel(x.commanded_volume, y.commanded_volume));
            compared += 1;
        }
    }
    outcome(worst <= 1e-6, format!("{compared} rows, worst relative deviation {worst:.2e}"))
}

fn random_frame(r: &mut ChaCha8Rng) -> Frame {
    let op = Opcode::ALL[r.gen_range(0..Opcode::ALL.len())];
    let payload = (0..op.payload_len()).map(|_| r.gen()).collect();
    Frame::new(r.gen(), op, payload).unwrap()
}

// 7. Round trips and single-byte corruption.
fn protocol_robustness() -> Outcome {
    let mut r = rng(7);
    let mut mismatched = 0;
    for _ in 0..100_000 {
        let f = random_frame(&mut r);
        let bytes = f.encode();
        match decode_frame(&bytes) {
            (Decoded::Frame(g), n) if g == f && n == bytes.len() => {}
            _ => mismatched += 1,
        }
    }

    let sentinel = Frame::new(0x42, Opcode::StatusReq, Vec::new()).unwrap();
    let (mut corruptions, mut silent, mut lost_sentinel) = (0u64, 0u64, 0u64);
    for _ in 0..1000 {
        let f = random_frame(&mut r);
        let clean = f.encode();
        for i in 0..clean.len() {
            for v in 0..=255u8 {
                if v == clean[i] {
                    continue;
                }
                let mut bytes = clean.clone();
                bytes[i] = v;
                bytes.extend(sentinel.encode());
                corruptions += 1;
                let out: Vec<Frame> = Decoder::new().push(&bytes).into_iter().filter_map(Result::ok).collect();
                if out.iter().any(|g| *g != sentinel) {
                    silent += 1;
                }
                if !out.contains(&sentinel) {
                    lost_sentinel += 1;
                }
            }
        }
    }
    outcome(
        mismatched == 0 && silent == 0,
        format!(
            "1e5 round trips ({mismatched} mismatched); {corruptions} corruptions, {silent} undetected, \
             sentinel lost in {lost_sentinel}"
        ),
    )
}

/// Bit-at-a-time CRC-16/CCITT-FALSE, kept separate from the table version.
fn crc_bitwise(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &b in data {
        crc ^= u16::from(b) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
        }
    }
    crc
}

// 8. Reference CRC check value, and agreement with the table CRC.
fn crc_oracle() -> Outcome {
    let check = crc_bitwise(b"123456789");
    let mut r = rng(8);
    let mut disagree = 0;
    for _ in 0..10_000 {
        let len = r.gen_range(0..80);
        let data: Vec<u8> = (0..len).map(|_| r.gen()).collect();
        if crc_bitwise(&data) != crc16_ccitt_false(&data) {
            disagree += 1;
        }
    }
    outcome(
        check == 0x29B1 && crc16_ccitt_false(b"123456789") == 0x29B1 && disagree == 0,
        format!("bitwise check value {check:#06X}, {disagree} of 10000 random buffers disagree"),
    )
}

fn fixtures(kind: &str) -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/gait").join(kind);
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "gait"))
        .collect();
    files.sort();
    files
}

/// Compares `actual` with the golden file next to `source`, or rewrites it.
fn golden(source: &Path, ext: &str, actual: &str, update: bool, problems: &mut Vec<String>) {
    let path = source.with_extension(ext);
    if update {
        fs::write(&path, actual).unwrap();
    } else if fs::read_to_string(&path).ok().as_deref() != Some(actual) {
        problems.push(format!("{} differs from its golden file", path.display()));
    }
}

// 9. Gait corpus: golden frame dumps and positioned diagnostics.
fn dsl_corpus() -> Outcome {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some_and(|v| v == "1");
    let mut problems = Vec::new();
    let valid = fixtures("valid");
    for path in &valid {
        let text = fs::read_to_string(path).unwrap();
        match parse_gait(&text).map_err(|d| format!("{d:?}")).and_then(|p| compile_gait(&p).map_err(|e| e.to_string()))
        {
            Ok(compiled) => golden(path, "frames", &dump_frames(&flatten(&compiled)), update, &mut problems),
            Err(e) => problems.push(format!("{}: {e}", path.display())),
        }
    }
    let invalid = fixtures("invalid");
    for path in &invalid {
        let text = fs::read_to_string(path).unwrap();
        let lines = text.lines().count() as u32 + 1;
        match parse_gait(&text) {
            Ok(_) => problems.push(format!("{} parsed without error", path.display())),
            Err(diags) => {
                if diags.is_empty() || diags.iter().any(|d| d.span.line == 0 || d.span.col == 0 || d.span.line > lines)
                {
                    problems.push(format!("{}: diagnostic without a usable position", path.display()));
                }
                let rendered: String = diags.iter().map(|d| format!("{d}\n")).collect();
                golden(path, "diag", &rendered, update, &mut problems);
            }
        }
    }
    let pass = problems.is_empty() && valid.len() >= 20 && invalid.len() >= 20;
    let mut detail = format!("{} valid, {} invalid programs", valid.len(), invalid.len());
    if update {
        detail.push_str(", golden files rewritten");
    }
    for p in problems.iter().take(5) {
        let _ = write!(detail, "; {p}");
    }
    outcome(pass, detail)
}

// 10. Three pumps, 1 kHz, 60 simulated seconds.
fn performance() -> Outcome {
    let start = Instant::now();
    let program = parse_gait(
        "pump a {}\npump b {}\npump c {}\n\
         wave a sine period=2 amplitude_ml=10\n\
         wave b trapezoid period=2 amplitude_ml=6 phase=0.3333333333333333 offset_ml=1\n\
         wave c sine period=2 amplitude_ml=10 duty=0.3 phase=0.6666666666666666\n\
         run 60s\n",
    )
    .unwrap();
    let out = run_sim(&program, &SimBackend::uniform(&program, PlantConfig::default()), &RunOptions::default(), |_| {})
        .unwrap();
    let elapsed = start.elapsed();
    outcome(
        elapsed < Duration::from_secs(1) && out.report.end_time == 60.0,
        format!("{} records, {}", out.records.len(), secs(elapsed)),
    )
}

fn main() -> ExitCode {
    // libtest-style filters: `cargo test --test acceptance -- 7` runs only 7
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("kinematics round-trip", kinematics_round_trip),
        ("zero-drift cycling", zero_drift),
        ("bidirectionality (Boyle)", bidirectional),
        ("gas conservation", conservation),
        ("compliant equilibrium", compliant_equilibrium),
        ("phase rotation", phase_rotation),
        ("protocol robustness", protocol_robustness),
        ("CRC oracle", crc_oracle),
        ("gait corpus", dsl_corpus),
        ("performance", performance),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let o = check();
        println!("[{}] {n:>2}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
