//! Telemetry CSV to SVG. One panel per pump on a shared time axis:
//! commanded volume on the left scale, voxel pressure (when present) on the
//! right.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs::File;
use std::path::Path;

use pumpctl_core::orchestrator::TELEMETRY_HEADER;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    pub t: f64,
    pub pump_id: u8,
    pub commanded: f64,
    pub position: i64,
    pub voxel: Option<f64>,
}

#[derive(Debug)]
pub enum PlotError {
    Io(String),
    /// 1-based line and column of the offending field.
    Schema {
        line: u64,
        col: usize,
        message: String,
    },
}

impl fmt::Display for PlotError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlotError::Io(m) => f.write_str(m),
            PlotError::Schema { line, col, message } => write!(f, "{line}:{col}: {message}"),
        }
    }
}

fn columns() -> Vec<&'static str> {
    TELEMETRY_HEADER.split(',').collect()
}

/// Column where field `idx` starts; our writer never quotes.
fn column_of(record: &csv::StringRecord, idx: usize) -> usize {
    1 + record.iter().take(idx).map(|f| f.chars().count() + 1).sum::<usize>()
}

pub fn read_telemetry(path: &Path) -> Result<Vec<Row>, PlotError> {
    let file = File::open(path).map_err(|e| PlotError::Io(e.to_string()))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    let expected = columns();
    let mut records = reader.records();

    let schema = |line: u64, col: usize, message: String| PlotError::Schema { line, col, message };
    let header = match records.next() {
        None => return Err(schema(1, 1, format!("empty file; expected the header `{TELEMETRY_HEADER}`"))),
        Some(r) => r.map_err(|e| csv_error(&e))?,
    };
    for (i, want) in expected.iter().enumerate() {
        match header.get(i) {
            Some(got) if got.trim() == *want => {}
            Some(got) => {
                return Err(schema(1, column_of(&header, i), format!("expected column `{want}`, found `{got}`")));
            }
            None => {
                let col = header.as_slice().len() + header.len();
                return Err(schema(1, col.max(1), format!("missing column `{want}`")));
            }
        }
    }
    if header.len() > expected.len() {
        let i = expected.len();
        return Err(schema(1, column_of(&header, i), format!("unexpected extra column `{}`", &header[i])));
    }

    let mut rows = Vec::new();
    for record in records {
        let record = record.map_err(|e| csv_error(&e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            let col = if record.len() < expected.len() {
                record.iter().map(|f| f.chars().count() + 1).sum::<usize>().max(1)
            } else {
                column_of(&record, expected.len())
            };
            return Err(schema(line, col, format!("expected {} fields, found {}", expected.len(), record.len())));
        }
        let field = |i: usize| -> Result<f64, PlotError> {
            let s = record[i].trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| schema(line, column_of(&record, i), format!("`{}` is not a number: `{s}`", expected[i])))
        };
        let whole = |i: usize| -> Result<i64, PlotError> {
            let s = record[i].trim();
            s.parse::<i64>()
                .map_err(|_| schema(line, column_of(&record, i), format!("`{}` is not an integer: `{s}`", expected[i])))
        };
        let pump_id = whole(1)?;
        let pump_id = u8::try_from(pump_id)
            .map_err(|_| schema(line, column_of(&record, 1), format!("pump id {pump_id} is out of range")))?;
        let voxel = if record[4].trim().is_empty() { None } else { Some(field(4)?) };
        rows.push(Row { t: field(0)?, pump_id, commanded: field(2)?, position: whole(3)?, voxel });
    }
    if rows.is_empty() {
        return Err(schema(2, 1, "no telemetry rows after the header".into()));
    }
    Ok(rows)
}

fn csv_error(e: &csv::Error) -> PlotError {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(io) => PlotError::Io(io.to_string()),
        _ => PlotError::Schema { line, col: 1, message: e.to_string() },
    }
}

const WIDTH: f64 = 900.0;
const PANEL_HEIGHT: f64 = 240.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 80.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 40.0;

/// About five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return vec![lo];
    }
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

/// `[lo, hi]` with a little headroom, never empty.
fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return None;
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { lo.abs().max(1.0) * 0.05 };
    Some((lo - pad, hi + pad))
}

pub fn render_svg(rows: &[Row]) -> String {
    let mut by_pump: BTreeMap<u8, Vec<&Row>> = BTreeMap::new();
    for r in rows {
        by_pump.entry(r.pump_id).or_default().push(r);
    }
    for v in by_pump.values_mut() {
        v.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
    let (t0, t1) = {
        let lo = rows.iter().map(|r| r.t).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.t).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo, lo + 1.0)
        }
    };
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let x_of = |t: f64| x0 + (t - t0) / (t1 - t0) * (x1 - x0);
    let height = PANEL_HEIGHT * by_pump.len() as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, (id, pts)) in by_pump.iter().enumerate() {
        let top = i as f64 * PANEL_HEIGHT + TOP;
        let bottom = (i + 1) as f64 * PANEL_HEIGHT - BOTTOM;
        let _ = writeln!(
            s,
            r#"<g class="panel" data-pump="{id}" data-t0="{t0}" data-t1="{t1}" data-x0="{x0}" data-x1="{x1}">"#
        );
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{top}" width="{}" height="{}" fill="none" stroke="dimgray"/>"#,
            x1 - x0,
            bottom - top
        );
        let _ = writeln!(s, r#"<text x="{x0}" y="{}" font-weight="bold">pump {id}</text>"#, top - 8.0);
        for t in ticks(t0, t1) {
            let x = x_of(t);
            let _ =
                writeln!(s, r#"<line x1="{x:.2}" y1="{bottom}" x2="{x:.2}" y2="{}" stroke="dimgray"/>"#, bottom + 4.0);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, bottom + 16.0, label(t));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">t (s)</text>"#, (x0 + x1) / 2.0, bottom + 32.0);

        let mut axis = |values: Vec<f64>, class: &str, colour: &str, unit: &str, right: bool| {
            let Some((lo, hi)) = range(values.iter().copied()) else {
                return;
            };
            let y_of = |v: f64| bottom - (v - lo) / (hi - lo) * (bottom - top);
            let (ax, anchor, dx) = if right { (x1, "start", 6.0) } else { (x0, "end", -6.0) };
            for v in ticks(lo, hi) {
                let y = y_of(v);
                let _ = writeln!(
                    s,
                    r#"<line x1="{ax}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="{colour}"/>"#,
                    ax + dx * 0.6
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{:.2}" text-anchor="{anchor}" fill="{colour}">{}</text>"#,
                    ax + dx,
                    y + 4.0,
                    label(v)
                );
            }
            let ux = if right { x1 + 8.0 } else { x0 - 8.0 };
            let _ =
                writeln!(s, r#"<text x="{ux}" y="{}" text-anchor="{anchor}" fill="{colour}">{unit}</text>"#, top - 8.0);
            let points: Vec<String> =
                pts.iter().zip(&values).map(|(r, &v)| format!("{:.2},{:.2}", x_of(r.t), y_of(v))).collect();
            let _ = writeln!(
                s,
                r#"<polyline class="{class}" fill="none" stroke="{colour}" stroke-width="1.2" points="{}"/>"#,
                points.join(" ")
            );
        };
        axis(pts.iter().map(|r| r.commanded).collect(), "commanded", "#1f5fbf", "mL", false);
        if pts.iter().all(|r| r.voxel.is_some()) {
            axis(pts.iter().map(|r| r.voxel.unwrap_or(0.0) / 1000.0).collect(), "pressure", "#c0392b", "kPa", true);
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}
