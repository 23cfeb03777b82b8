//! Lowers a gait program to wire frames, and renders frames for humans.

use std::fmt::Write as _;

use thiserror::Error;

use super::frame::{Frame, Opcode, BROADCAST};
use super::gait::{GaitProgram, Span};
use super::payload::{empty, ConfigurePayload, QuantizationOverflow, StartPayload, TelemetryPayload, WaveformPayload};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{}: pump {pump}: {source}", span.map_or_else(|| "-".to_string(), |s| s.to_string()))]
pub struct CompileError {
    /// Pump name, or `run` for the START frame.
    pub pump: String,
    pub span: Option<Span>,
    #[source]
    pub source: QuantizationOverflow,
}

/// Frame sequences in send order: each pump (by wire id) gets CONFIGURE,
/// SET_WAVEFORM (when it has a wave) and HOME; the last entry is the single
/// broadcast START that fixes the shared epoch.
pub fn compile_gait(program: &GaitProgram) -> Result<Vec<(u8, Vec<Frame>)>, CompileError> {
    let mut out = Vec::with_capacity(program.pumps.len() + 1);
    for decl in program.pumps_by_id() {
        let id = decl.config.pump_id();
        let err = |span: Span| move |source| CompileError { pump: decl.name.clone(), span: Some(span), source };
        let mut frames = vec![ConfigurePayload::from_config(&decl.config).map_err(err(decl.span))?.frame(id)];
        if let Some(w) = program.waves.get(&id) {
            frames.push(WaveformPayload::from_spec(&w.spec).map_err(err(w.span))?.frame(id));
        }
        frames.push(empty(id, Opcode::Home));
        out.push((id, frames));
    }
    let start = StartPayload::from_duration(program.run.seconds()).map_err(|source| CompileError {
        pump: "run".into(),
        span: None,
        source,
    })?;
    out.push((BROADCAST, vec![start.frame(BROADCAST)]));
    Ok(out)
}

pub fn flatten(compiled: &[(u8, Vec<Frame>)]) -> Vec<Frame> {
    compiled.iter().flat_map(|(_, f)| f.iter().cloned()).collect()
}

pub fn wire_bytes(frames: &[Frame]) -> Vec<u8> {
    frames.iter().flat_map(Frame::encode).collect()
}

/// Payload fields as `name=value` pairs.
pub fn annotate(frame: &Frame) -> String {
    match frame.opcode() {
        Opcode::Configure => {
            let Ok(p) = ConfigurePayload::decode(frame) else { return String::new() };
            format!(
                "bore_um={} max_travel_um={} dead_volume_ul={} pitch_um={} steps_per_rev={} microsteps={} \
                 invert={} max_step_rate={} max_accel={} soft_limit_um={}",
                p.bore_um,
                p.max_travel_um,
                p.dead_volume_ul,
                p.pitch_um,
                p.steps_per_rev,
                p.microsteps,
                p.invert,
                p.max_step_rate,
                p.max_accel,
                p.soft_limit_um
            )
        }
        Opcode::SetWaveform => {
            let Ok(p) = WaveformPayload::decode(frame) else { return String::new() };
            format!(
                "shape={} period_ms={} amplitude_ul={} duty={}/65536 phase={}/65536 offset_ul={} ramp={}/65536 cycles={}",
                p.shape, p.period_ms, p.amplitude_ul, p.duty, p.phase, p.offset_ul, p.ramp, p.cycles
            )
        }
        Opcode::Start => match StartPayload::decode(frame).map(|p| p.duration()) {
            Ok(Some(_)) => format!("run_ms={}", StartPayload::decode(frame).map_or(0, |p| p.run_ms)),
            Ok(None) => "run_ms=forever".into(),
            Err(_) => String::new(),
        },
        Opcode::Ack => format!("acked={:#04x}", frame.payload()[0]),
        Opcode::Nack => format!("rejected={:#04x} code={:#04x}", frame.payload()[0], frame.payload()[1]),
        Opcode::Telemetry => {
            let Ok(p) = TelemetryPayload::decode(frame) else { return String::new() };
            format!("t_ms={} position={} status={:#04x}", p.t_ms, p.position, p.status)
        }
        Opcode::Stop | Opcode::Home | Opcode::StatusReq => String::new(),
    }
}

/// Deterministic listing: one header line per frame, its decoded fields,
/// then the wire bytes 16 to a line.
pub fn dump_frames(frames: &[Frame]) -> String {
    let total: usize = frames.iter().map(|f| f.encode().len()).sum();
    let mut s = String::new();
    let _ = writeln!(s, "# {} frames, {} bytes on the wire", frames.len(), total);
    for (i, f) in frames.iter().enumerate() {
        let target = if f.is_broadcast() { "broadcast".to_string() } else { format!("pump {:#04x}", f.pump_id()) };
        let _ = writeln!(
            s,
            "frame {i}: {target} {} ({:#04x}) len {} crc {:#06x}",
            f.opcode(),
            f.opcode() as u8,
            f.payload().len(),
            f.crc()
        );
        let fields = annotate(f);
        if !fields.is_empty() {
            let _ = writeln!(s, "  {fields}");
        }
        for chunk in f.encode().chunks(16) {
            let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(s, "  {}", hex.join(" "));
        }
    }
    s
}
