//! Serial backend. Host wall-clock time is used only for I/O timeouts;
//! waveform timing runs on the pumps from the broadcast START.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, Read, Write};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::{cycles_done, ExitReport, PumpSummary, RunError, RunOptions, RunOutput, StopHandle, TelemetryRecord};
use crate::protocol::payload::{empty, TelemetryPayload};
use crate::protocol::{compile_gait, Decoder, Frame, GaitProgram, Opcode, RunDuration, BROADCAST};

pub const ACK_TIMEOUT: Duration = Duration::from_millis(500);
pub const ACK_RETRIES: u32 = 2;
/// Longest silence tolerated while waiting for telemetry.
pub const IDLE_TIMEOUT: Duration = Duration::from_secs(2);
const POLL: Duration = Duration::from_millis(20);

/// Byte pipe to the pump bus.
pub trait Transport: Send {
    fn write_all(&mut self, bytes: &[u8]) -> io::Result<()>;
    /// Reads whatever arrives within `timeout`; `Ok(0)` when nothing did.
    fn read(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<usize>;
}

pub struct SerialPortTransport {
    port: Box<dyn serialport::SerialPort>,
}

impl SerialPortTransport {
    /// Opens `path` at `baud`, 8N1.
    pub fn open(path: &str, baud: u32) -> io::Result<Self> {
        let port = serialport::new(path, baud).timeout(POLL).open()?;
        Ok(Self { port })
    }
}

impl Transport for SerialPortTransport {
    fn write_all(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.port.write_all(bytes)?;
        self.port.flush()
    }

    fn read(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<usize> {
        self.port.set_timeout(timeout)?;
        match self.port.read(buf) {
            Ok(n) => Ok(n),
            Err(e) if e.kind() == io::ErrorKind::TimedOut => Ok(0),
            Err(e) => Err(e),
        }
    }
}

struct Port {
    transport: Box<dyn Transport>,
    decoder: Decoder,
    pending: VecDeque<Frame>,
}

/// An open bus with its ACK policy.
pub struct SerialLink {
    pub port_name: String,
    pub baud: u32,
    pub ack_timeout: Duration,
    pub retries: u32,
    pub idle_timeout: Duration,
    port: Mutex<Port>,
    stop: StopHandle,
}

impl SerialLink {
    pub fn open(port_name: &str, baud: u32) -> io::Result<Self> {
        Ok(Self::with_transport(port_name, baud, SerialPortTransport::open(port_name, baud)?))
    }

    pub fn with_transport(port_name: &str, baud: u32, transport: impl Transport + 'static) -> Self {
        Self {
            port_name: port_name.to_string(),
            baud,
            ack_timeout: ACK_TIMEOUT,
            retries: ACK_RETRIES,
            idle_timeout: IDLE_TIMEOUT,
            port: Mutex::new(Port {
                transport: Box::new(transport),
                decoder: Decoder::new(),
                pending: VecDeque::new(),
            }),
            stop: StopHandle::new(),
        }
    }

    pub fn stop_handle(&self) -> StopHandle {
        self.stop.clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Port> {
        // a panic elsewhere leaves the port usable; stop must still go out
        self.port.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn send(&self, frame: &Frame) -> Result<(), RunError> {
        self.lock().transport.write_all(&frame.encode())?;
        Ok(())
    }

    /// Next decoded frame, or `None` at the deadline or on stop. Corrupt
    /// frames are dropped; the decoder resynchronizes by itself.
    fn next_frame(&self, deadline: Instant) -> Result<Option<Frame>, RunError> {
        let mut buf = [0u8; 256];
        loop {
            let mut port = self.lock();
            if let Some(f) = port.pending.pop_front() {
                return Ok(Some(f));
            }
            let now = Instant::now();
            if now >= deadline || self.stop.is_stopped() {
                return Ok(None);
            }
            let n = port.transport.read(&mut buf, (deadline - now).min(POLL))?;
            let Port { decoder, pending, .. } = &mut *port;
            pending.extend(decoder.push(&buf[..n]).into_iter().filter_map(Result::ok));
        }
    }

    /// Sends a unicast frame and waits for its ACK, retrying on silence.
    fn request(&self, frame: &Frame) -> Result<(), RunError> {
        let (id, op) = (frame.pump_id(), frame.opcode());
        for _ in 0..=self.retries {
            self.send(frame)?;
            let deadline = Instant::now() + self.ack_timeout;
            while let Some(reply) = self.next_frame(deadline)? {
                if reply.pump_id() != id {
                    continue;
                }
                match reply.opcode() {
                    Opcode::Ack if reply.payload()[0] == op as u8 => return Ok(()),
                    Opcode::Nack if reply.payload()[0] == op as u8 => {
                        return Err(RunError::NackReceived { pump_id: id, opcode: op, code: reply.payload()[1] })
                    }
                    _ => {}
                }
            }
            if self.stop.is_stopped() {
                break;
            }
        }
        Err(RunError::Timeout { pump_id: id, opcode: op })
    }

    /// Broadcast STOP; no replies are awaited.
    pub fn stop_all(&self) -> Result<(), RunError> {
        self.stop.stop();
        self.send(&empty(BROADCAST, Opcode::Stop))
    }
}

/// Configures every pump, starts them together and collects telemetry
/// until the run length is reached or the run is stopped. On any failure a
/// broadcast STOP is attempted so no pump is left cycling.
pub fn run_serial(program: &GaitProgram, link: &SerialLink, options: &RunOptions) -> Result<RunOutput, RunError> {
    let result = drive(program, link, options);
    if result.is_err() {
        let _ = link.stop_all();
    }
    result
}

fn drive(program: &GaitProgram, link: &SerialLink, options: &RunOptions) -> Result<RunOutput, RunError> {
    link.stop.reset();
    let mut program = program.clone();
    if let Some(d) = options.duration {
        program.run = RunDuration::Seconds(d);
    }
    let horizon = program.run.seconds();
    for (_, frames) in compile_gait(&program)? {
        for f in &frames {
            if f.is_broadcast() {
                link.send(f)?;
            } else {
                link.request(f)?;
            }
        }
    }

    let mut records = Vec::new();
    let mut last_t: BTreeMap<u8, f64> = BTreeMap::new();
    let done = |last: &BTreeMap<u8, f64>| {
        horizon.is_some_and(|h| {
            program.pumps.iter().all(|p| last.get(&p.config.pump_id()).is_some_and(|&t| t >= h - 1e-9))
        })
    };
    let mut stopped_at = None;
    while !done(&last_t) {
        if link.stop.is_stopped() {
            stopped_at = Some(last_t.values().copied().fold(0.0, f64::max));
            break;
        }
        let Some(frame) = link.next_frame(Instant::now() + link.idle_timeout)? else {
            if link.stop.is_stopped() || horizon.is_none() {
                continue;
            }
            let missing = program
                .pumps_by_id()
                .into_iter()
                .map(|p| p.config.pump_id())
                .find(|id| !last_t.get(id).is_some_and(|&t| t >= horizon.unwrap_or(0.0) - 1e-9))
                .unwrap_or(BROADCAST);
            return Err(RunError::Timeout { pump_id: missing, opcode: Opcode::Telemetry });
        };
        let id = frame.pump_id();
        if frame.opcode() != Opcode::Telemetry || program.pump(id).is_none() {
            continue;
        }
        let Ok(tm) = TelemetryPayload::decode(&frame) else { continue };
        let t = f64::from(tm.t_ms) / 1000.0;
        last_t.entry(id).and_modify(|v| *v = v.max(t)).or_insert(t);
        records.push(TelemetryRecord {
            t,
            pump_id: id,
            commanded_volume: program.wave(id).map_or(0.0, |w| w.target_volume(t)),
            position: i64::from(tm.position),
            voxel_pressure: None,
        });
    }

    records.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.pump_id.cmp(&b.pump_id)));
    records.dedup_by(|b, a| a.t == b.t && a.pump_id == b.pump_id);

    let pumps = program
        .pumps_by_id()
        .into_iter()
        .map(|p| {
            let id = p.config.pump_id();
            let mine: Vec<_> = records.iter().filter(|r| r.pump_id == id).collect();
            PumpSummary {
                pump_id: id,
                name: p.name.clone(),
                cycles_completed: cycles_done(program.wave(id), last_t.get(&id).copied().unwrap_or(0.0)),
                max_abs_position: mine.iter().map(|r| r.position.abs()).max().unwrap_or(0),
                final_position: mine.last().map_or(0, |r| r.position),
                clamped_ticks: 0,
            }
        })
        .collect();
    let end_time = records.last().map_or(0.0, |r| r.t);
    let report = ExitReport { pumps, end_time, stopped_at, records: records.len(), errors: Vec::new() };
    Ok(RunOutput { records, report })
}
