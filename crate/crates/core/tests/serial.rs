//! Serial backend against an in-process mock of the pump firmware.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use pumpctl_core::orchestrator::{run_serial, run_sim, RunError, RunOptions, SerialLink, SimBackend, Transport};
use pumpctl_core::plant::PlantConfig;
use pumpctl_core::protocol::payload::{ack, nack, ConfigurePayload, StartPayload, TelemetryPayload, WaveformPayload};
use pumpctl_core::protocol::{crc16_ccitt_false, parse_gait, Decoder, Frame, GaitProgram, Opcode, BROADCAST};
use pumpctl_core::{PumpConfig, Tracker, WaveformSpec};

#[derive(Default)]
struct Bus {
    written: Vec<Frame>,
    outbound: VecDeque<u8>,
}

#[derive(Default)]
struct MockPump {
    bus: Arc<Mutex<Bus>>,
    decoder: Decoder,
    configs: BTreeMap<u8, PumpConfig>,
    waves: BTreeMap<u8, WaveformSpec>,
    silent: BTreeSet<u8>,
    /// Acknowledge commands but never report.
    mute: BTreeSet<u8>,
    nack_on: Option<(u8, Opcode, u8)>,
    /// ACKs to swallow before answering normally.
    drop_acks: u32,
    /// Telemetry rows emitted per pump when the run is open-ended.
    open_rows: u32,
    /// Each telemetry frame is sent twice, behind a burst of line noise.
    noisy: bool,
    closed: bool,
}

impl MockPump {
    fn new() -> (Self, Arc<Mutex<Bus>>) {
        let pump = Self { open_rows: 50, ..Self::default() };
        let bus = pump.bus.clone();
        (pump, bus)
    }

    fn reply(&mut self, frame: Frame) {
        self.bus.lock().unwrap().outbound.extend(frame.encode());
    }

    fn handle(&mut self, f: Frame) {
        let id = f.pump_id();
        self.bus.lock().unwrap().written.push(f.clone());
        if self.silent.contains(&id) {
            return;
        }
        if let Some((nid, op, code)) = self.nack_on {
            if nid == id && op == f.opcode() {
                return self.reply(nack(id, op, code));
            }
        }
        match f.opcode() {
            Opcode::Configure => {
                let cfg = ConfigurePayload::decode(&f).unwrap().to_config(id).unwrap();
                self.configs.insert(id, cfg);
            }
            Opcode::SetWaveform => {
                self.waves.insert(id, WaveformPayload::decode(&f).unwrap().to_spec().unwrap());
            }
            Opcode::Start => return self.start(StartPayload::decode(&f).unwrap().duration()),
            Opcode::Stop => return,
            _ => {}
        }
        if self.drop_acks > 0 {
            self.drop_acks -= 1;
            return;
        }
        self.reply(ack(id, f.opcode()));
    }

    /// Runs every configured pump at 1 kHz and queues 100 Hz telemetry.
    fn start(&mut self, run: Option<f64>) {
        let rows = run.map_or(self.open_rows, |s| (s * 100.0).round() as u32 + 1);
        for (&id, cfg) in &self.configs.clone() {
            if self.mute.contains(&id) {
                continue;
            }
            let mut tracker = self.waves.get(&id).map(|w| Tracker::new(cfg, w, 1e-3).unwrap());
            let mut pos = tracker.as_ref().map_or(0, |t| t.state().position);
            for row in 0..rows {
                if row > 0 {
                    for _ in 0..10 {
                        pos = tracker.as_mut().map_or(pos, |t| t.advance().position);
                    }
                }
                let tm = TelemetryPayload { t_ms: row * 10, position: cfg.drive().normalize(pos) as i32, status: 1 };
                if self.noisy {
                    self.bus.lock().unwrap().outbound.extend([0x7E, 0x13, 0x7D, 0x00, 0x55]);
                    self.reply(tm.frame(id));
                }
                self.reply(tm.frame(id));
            }
        }
    }
}

impl Transport for MockPump {
    fn write_all(&mut self, bytes: &[u8]) -> io::Result<()> {
        if self.closed {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "port closed"));
        }
        for f in self.decoder.push(bytes) {
            self.handle(f.expect("host sent a corrupt frame"));
        }
        Ok(())
    }

    fn read(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<usize> {
        let mut bus = self.bus.lock().unwrap();
        if bus.outbound.is_empty() {
            drop(bus);
            thread::sleep(timeout.min(Duration::from_millis(2)));
            return Ok(0);
        }
        let n = buf.len().min(bus.outbound.len());
        for (slot, b) in buf.iter_mut().zip(bus.outbound.drain(..n)) {
            *slot = b;
        }
        Ok(n)
    }
}

fn link(pump: MockPump) -> SerialLink {
    let mut l = SerialLink::with_transport("mock", 115_200, pump);
    l.ack_timeout = Duration::from_millis(40);
    l.idle_timeout = Duration::from_millis(200);
    l
}

/// Every parameter is exact on the wire (ms, µL, 1/65536 fractions), so
/// the pumps follow the very waveform the host simulates.
fn two_pumps(run: &str) -> GaitProgram {
    parse_gait(&format!(
        "pump a {{}}\npump b {{ invert=1 }}\n\
         wave a sine period=1 amplitude_ml=4\n\
         wave b trapezoid period=0.5 amplitude_ml=2 duty=0.375 ramp=0.25 offset_ml=1\n{run}\n"
    ))
    .unwrap()
}

fn opcodes(bus: &Arc<Mutex<Bus>>) -> Vec<(u8, Opcode)> {
    bus.lock().unwrap().written.iter().map(|f| (f.pump_id(), f.opcode())).collect()
}

#[test]
fn telemetry_matches_simulation() {
    let program = two_pumps("run 1s");
    let (pump, bus) = MockPump::new();
    let out = run_serial(&program, &link(pump), &RunOptions::default()).unwrap();
    assert_eq!(
        opcodes(&bus),
        [
            (0, Opcode::Configure),
            (0, Opcode::SetWaveform),
            (0, Opcode::Home),
            (1, Opcode::Configure),
            (1, Opcode::SetWaveform),
            (1, Opcode::Home),
            (BROADCAST, Opcode::Start),
        ]
    );

    let sim = run_sim(&program, &SimBackend::uniform(&program, PlantConfig::default()), &RunOptions::default(), |_| {})
        .unwrap();
    assert_eq!(out.records.len(), 101 * 2);
    assert_eq!(out.records.len(), sim.records.len());
    for (s, r) in sim.records.iter().zip(&out.records) {
        assert_eq!((s.t, s.pump_id, s.position), (r.t, r.pump_id, r.position));
        // tick-grid sampling vs. the closed form at t: equal to rounding
        assert!((s.commanded_volume - r.commanded_volume).abs() < 1e-12, "{s:?} {r:?}");
        assert_eq!(r.voxel_pressure, None);
    }
    assert_eq!(out.report.stopped_at, None);
    assert_eq!(out.report.pumps[0].cycles_completed, 1);
    assert_eq!(out.report.pumps[1].cycles_completed, 2);
}

#[test]
fn noise_and_duplicates_are_dropped() {
    let program = two_pumps("run 0.5s");
    let (mut pump, _) = MockPump::new();
    pump.noisy = true;
    let out = run_serial(&program, &link(pump), &RunOptions::default()).unwrap();
    assert_eq!(out.records.len(), 51 * 2);
    for w in out.records.windows(2) {
        assert!((w[0].t, w[0].pump_id) < (w[1].t, w[1].pump_id));
    }
}

#[test]
fn lost_ack_is_retried() {
    let program = two_pumps("run 0.1s");
    let (mut pump, bus) = MockPump::new();
    pump.drop_acks = 2;
    run_serial(&program, &link(pump), &RunOptions::default()).unwrap();
    let configures = opcodes(&bus).iter().filter(|(id, op)| *id == 0 && *op == Opcode::Configure).count();
    assert_eq!(configures, 3);
}

#[test]
fn silent_pump_times_out_after_retries() {
    let program = two_pumps("run 0.1s");
    let (mut pump, bus) = MockPump::new();
    pump.silent.insert(1);
    match run_serial(&program, &link(pump), &RunOptions::default()) {
        Err(RunError::Timeout { pump_id: 1, opcode: Opcode::Configure }) => {}
        other => panic!("{:?}", other.map(|o| o.report)),
    }
    let tries = opcodes(&bus).iter().filter(|(id, _)| *id == 1).count();
    assert_eq!(tries, 3);
    assert!(!opcodes(&bus).contains(&(BROADCAST, Opcode::Start)));
}

#[test]
fn nack_aborts_the_run() {
    let program = two_pumps("run 0.1s");
    let (mut pump, bus) = MockPump::new();
    pump.nack_on = Some((0, Opcode::SetWaveform, 0x04));
    let err = run_serial(&program, &link(pump), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, RunError::NackReceived { pump_id: 0, opcode: Opcode::SetWaveform, code: 0x04 }));
    assert_eq!(err.to_string(), "pump 0 rejected SET_WAVEFORM with code 0x04");
    // a failed run still tells every pump to stop
    let last = bus.lock().unwrap().written.last().unwrap().clone();
    assert!(last.is_broadcast() && last.opcode() == Opcode::Stop);
}

#[test]
fn telemetry_silence_is_a_timeout() {
    let program = two_pumps("run 1s");
    let (mut pump, _) = MockPump::new();
    pump.mute.insert(1);
    match run_serial(&program, &link(pump), &RunOptions::default()) {
        Err(RunError::Timeout { pump_id: 1, opcode: Opcode::Telemetry }) => {}
        other => panic!("{:?}", other.map(|o| o.report)),
    }
}

#[test]
fn open_ended_run_ends_on_stop() {
    let program = two_pumps("");
    let (pump, bus) = MockPump::new();
    let l = link(pump);
    let out = thread::scope(|s| {
        let h = s.spawn(|| run_serial(&program, &l, &RunOptions::default()));
        thread::sleep(Duration::from_millis(300));
        l.stop_all().unwrap();
        h.join().unwrap()
    })
    .unwrap();
    assert_eq!(out.records.len(), 50 * 2);
    assert_eq!(out.report.stopped_at, Some(0.49));
    assert_eq!(opcodes(&bus).last(), Some(&(BROADCAST, Opcode::Stop)));
    let crc = crc16_ccitt_false(&[BROADCAST, Opcode::Stop as u8, 0]).to_be_bytes();
    assert_eq!(
        bus.lock().unwrap().written.last().unwrap().encode(),
        [0x7E, 0xFF, Opcode::Stop as u8, 0x00, crc[0], crc[1]]
    );
}

#[test]
fn stop_on_a_closed_port_reports_the_write_failure() {
    let (mut pump, _) = MockPump::new();
    pump.closed = true;
    let l = link(pump);
    let err = l.stop_all().unwrap_err();
    assert!(matches!(&err, RunError::Io(e) if e.kind() == io::ErrorKind::BrokenPipe), "{err}");
    assert!(l.stop_handle().is_stopped());
}
