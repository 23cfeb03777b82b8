//! Gait programs: a line-oriented text format declaring pumps, one
//! waveform per pump and a run length.
//!
//! ```text
//! # two voxels in antiphase
//! pump left  { bore_mm=26.7 max_travel_mm=110 }
//! pump right { bore_mm=26.7 max_travel_mm=110 }
//! wave left  sine period=2 amplitude_ml=10
//! wave right sine period=2 amplitude_ml=10 phase=0.5
//! run 60s
//! ```
//!
//! Pump blocks may span several lines. Pumps get wire ids in declaration
//! order unless they set `id=`. Plant files for the simulator use the same
//! block syntax with the `plant` keyword.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::InvariantError;
use crate::kinematics::{DriveSpec, PumpConfig, SyringeSpec, MAX_PUMP_ID};
use crate::plant::PlantConfig;
use crate::waveform::{Shape, WaveformSpec};

/// 1-based line and column (in characters).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiagnosticKind {
    SyntaxError,
    UnknownKey,
    DuplicatePump,
    DuplicateWave,
    WaveForUndeclaredPump,
    InvariantViolation,
}

impl DiagnosticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DiagnosticKind::SyntaxError => "syntax error",
            DiagnosticKind::UnknownKey => "unknown key",
            DiagnosticKind::DuplicatePump => "duplicate pump",
            DiagnosticKind::DuplicateWave => "duplicate wave",
            DiagnosticKind::WaveForUndeclaredPump => "wave for undeclared pump",
            DiagnosticKind::InvariantViolation => "invariant violation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub span: Span,
    pub message: String,
}

impl Diagnostic {
    fn new(kind: DiagnosticKind, span: Span, message: impl Into<String>) -> Self {
        Self { kind, span, message: message.into() }
    }

    fn syntax(span: Span, message: impl Into<String>) -> Self {
        Self::new(DiagnosticKind::SyntaxError, span, message)
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.span, self.kind.as_str(), self.message)
    }
}

// ---------------------------------------------------------------- lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Eq,
    LBrace,
    RBrace,
    Newline,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Number(n) => format!("number {n}"),
            Tok::Eq => "`=`".into(),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::Newline => "end of line".into(),
            Tok::Eof => "end of file".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: Span,
}

fn lex(text: &str, diags: &mut Vec<Diagnostic>) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    while i < chars.len() {
        let c = chars[i];
        let span = Span { line, col };
        let start = i;
        match c {
            '\n' => {
                out.push(Token { tok: Tok::Newline, span });
                i += 1;
                line += 1;
                col = 1;
                continue;
            }
            c if c.is_whitespace() => i += 1,
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '=' => {
                out.push(Token { tok: Tok::Eq, span });
                i += 1;
            }
            '{' => {
                out.push(Token { tok: Tok::LBrace, span });
                i += 1;
            }
            '}' => {
                out.push(Token { tok: Tok::RBrace, span });
                i += 1;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), span });
            }
            c if c.is_ascii_digit() || c == '.' || c == '-' || c == '+' => {
                i = scan_number(&chars, i);
                let lexeme: String = chars[start..i].iter().collect();
                match lexeme.parse::<f64>() {
                    Ok(v) if lexeme.bytes().any(|b| b.is_ascii_digit()) => {
                        out.push(Token { tok: Tok::Number(v), span })
                    }
                    _ => {
                        diags.push(Diagnostic::syntax(span, format!("malformed number `{lexeme}`")));
                        if i == start {
                            i += 1;
                        }
                    }
                }
            }
            other => {
                diags.push(Diagnostic::syntax(span, format!("unexpected character `{other}`")));
                i += 1;
            }
        }
        col += (i - start) as u32;
    }
    out.push(Token { tok: Tok::Eof, span: Span { line, col } });
    out
}

/// `[+-]? digits? (. digits?)? ([eE] [+-]? digits)?`; returns the end index.
fn scan_number(chars: &[char], mut i: usize) -> usize {
    let digits = |i: &mut usize| {
        while *i < chars.len() && chars[*i].is_ascii_digit() {
            *i += 1;
        }
    };
    if matches!(chars[i], '+' | '-') {
        i += 1;
    }
    digits(&mut i);
    if i < chars.len() && chars[i] == '.' {
        i += 1;
        digits(&mut i);
    }
    if i < chars.len() && matches!(chars[i], 'e' | 'E') {
        let mut j = i + 1;
        if j < chars.len() && matches!(chars[j], '+' | '-') {
            j += 1;
        }
        if j < chars.len() && chars[j].is_ascii_digit() {
            i = j;
            digits(&mut i);
        }
    }
    i
}

// ---------------------------------------------------------------- syntax

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    key_span: Span,
    value: f64,
    value_span: Span,
}

#[derive(Debug, Clone)]
enum Stmt {
    Block { span: Span, name: String, entries: Vec<Entry> },
    Wave { span: Span, name: String, name_span: Span, shape: Shape, entries: Vec<Entry> },
    Run { span: Span, seconds: Option<(f64, Span)> },
}

struct Parser<'d> {
    toks: Vec<Token>,
    pos: usize,
    diags: &'d mut Vec<Diagnostic>,
}

type Parsed<T> = Result<T, Diagnostic>;

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn expected(&self, what: &str) -> Diagnostic {
        let t = self.peek();
        Diagnostic::syntax(t.span, format!("expected {what}, found {}", t.tok.describe()))
    }

    fn ident(&mut self, what: &str) -> Parsed<(String, Span)> {
        match self.peek().tok.clone() {
            Tok::Ident(s) => Ok((s, self.bump().span)),
            _ => Err(self.expected(what)),
        }
    }

    fn number(&mut self, what: &str) -> Parsed<(f64, Span)> {
        match self.peek().tok {
            Tok::Number(v) => Ok((v, self.bump().span)),
            _ => Err(self.expected(what)),
        }
    }

    fn eat(&mut self, tok: &Tok, what: &str) -> Parsed<Span> {
        if &self.peek().tok == tok {
            Ok(self.bump().span)
        } else {
            Err(self.expected(what))
        }
    }

    fn end_of_line(&mut self) -> Parsed<()> {
        match self.peek().tok {
            Tok::Newline => {
                self.bump();
                Ok(())
            }
            Tok::Eof => Ok(()),
            _ => Err(self.expected("end of line")),
        }
    }

    fn entry(&mut self) -> Parsed<Entry> {
        let (key, key_span) = self.ident("a key")?;
        self.eat(&Tok::Eq, &format!("`=` after `{key}`"))?;
        let (value, value_span) = self.number(&format!("a number for `{key}`"))?;
        Ok(Entry { key, key_span, value, value_span })
    }

    /// Skips to the start of the next line, or past the closing brace when
    /// recovering inside a block.
    fn recover(&mut self, in_block: bool) {
        loop {
            match self.peek().tok {
                Tok::Eof => return,
                Tok::RBrace if in_block => {
                    self.bump();
                    let _ = self.end_of_line();
                    return;
                }
                Tok::Newline if !in_block => {
                    self.bump();
                    return;
                }
                _ => {
                    self.bump();
                }
            }
        }
    }

    fn statements(&mut self, keywords: &[&str]) -> Vec<Stmt> {
        let mut out = Vec::new();
        loop {
            match self.peek().tok.clone() {
                Tok::Eof => return out,
                Tok::Newline => {
                    self.bump();
                }
                Tok::Ident(kw) if keywords.contains(&kw.as_str()) => {
                    let mut in_block = false;
                    let res = match kw.as_str() {
                        "wave" => self.wave(),
                        "run" => self.run(),
                        _ => self.block(&mut in_block),
                    };
                    match res {
                        Ok(stmt) => out.push(stmt),
                        Err(d) => {
                            self.diags.push(d);
                            self.recover(in_block);
                        }
                    }
                }
                _ => {
                    let list = keywords.iter().map(|k| format!("`{k}`")).collect::<Vec<_>>().join(", ");
                    let d = self.expected(&format!("one of {list}"));
                    self.diags.push(d);
                    self.recover(false);
                }
            }
        }
    }

    fn block(&mut self, in_block: &mut bool) -> Parsed<Stmt> {
        let kw = self.bump();
        let Tok::Ident(keyword) = kw.tok else { unreachable!("called on a keyword") };
        let (name, _) = self.ident(&format!("a {keyword} name"))?;
        self.eat(&Tok::LBrace, "`{`")?;
        *in_block = true;
        let mut entries = Vec::new();
        loop {
            match self.peek().tok {
                Tok::Newline => {
                    self.bump();
                }
                Tok::RBrace => {
                    self.bump();
                    break;
                }
                Tok::Eof => return Err(Diagnostic::syntax(kw.span, format!("unclosed `{{` in {keyword} `{name}`"))),
                _ => {
                    let e = self.entry()?;
                    check_repeat(&entries, &e)?;
                    entries.push(e);
                }
            }
        }
        *in_block = false;
        self.end_of_line()?;
        Ok(Stmt::Block { span: kw.span, name, entries })
    }

    fn wave(&mut self) -> Parsed<Stmt> {
        let span = self.bump().span;
        let (name, name_span) = self.ident("a pump name")?;
        let (shape_name, shape_span) = self.ident("a shape (sine, trapezoid, square)")?;
        let shape = Shape::from_str(&shape_name).map_err(|_| {
            Diagnostic::syntax(shape_span, format!("unknown shape `{shape_name}`; expected sine, trapezoid or square"))
        })?;
        let mut entries = Vec::new();
        while !matches!(self.peek().tok, Tok::Newline | Tok::Eof) {
            let e = self.entry()?;
            check_repeat(&entries, &e)?;
            entries.push(e);
        }
        self.end_of_line()?;
        Ok(Stmt::Wave { span, name, name_span, shape, entries })
    }

    fn run(&mut self) -> Parsed<Stmt> {
        let span = self.bump().span;
        let seconds = match self.peek().tok.clone() {
            Tok::Ident(s) if s == "forever" => {
                self.bump();
                None
            }
            Tok::Number(v) => {
                let vspan = self.bump().span;
                match self.peek().tok.clone() {
                    Tok::Ident(u) if u == "s" => {
                        self.bump();
                    }
                    _ => return Err(self.expected("unit `s`")),
                }
                Some((v, vspan))
            }
            _ => return Err(self.expected("a duration such as `60s`, or `forever`")),
        };
        self.end_of_line()?;
        Ok(Stmt::Run { span, seconds })
    }
}

fn check_repeat(entries: &[Entry], e: &Entry) -> Parsed<()> {
    if let Some(prev) = entries.iter().find(|p| p.key == e.key) {
        return Err(Diagnostic::syntax(e.key_span, format!("`{}` given twice (first at {})", e.key, prev.key_span)));
    }
    Ok(())
}

fn parse_statements(text: &str, keywords: &[&str], diags: &mut Vec<Diagnostic>) -> Vec<Stmt> {
    let toks = lex(text, diags);
    Parser { toks, pos: 0, diags }.statements(keywords)
}

// ---------------------------------------------------------------- semantics

pub const PUMP_KEYS: [&str; 11] = [
    "id",
    "bore_mm",
    "max_travel_mm",
    "dead_volume_ml",
    "pitch_mm",
    "steps_per_rev",
    "microsteps",
    "max_step_rate",
    "max_accel",
    "soft_limit_mm",
    "invert",
];
pub const WAVE_KEYS: [&str; 7] = ["period", "amplitude_ml", "duty", "phase", "offset_ml", "ramp", "cycles"];
pub const PLANT_KEYS: [&str; 7] = [
    "ambient_pa",
    "syringe_gas_ml",
    "voxel_ml",
    "compliance_ml_per_pa",
    "resistance_pa_s_per_ml",
    "tube_ml",
    "seal_ml",
];

/// Key/value lookups for one declaration, with errors pointing at the
/// offending entry (or at the declaration when a default was used).
struct Fields<'a> {
    what: &'static str,
    decl: Span,
    entries: &'a [Entry],
}

impl<'a> Fields<'a> {
    fn new(
        what: &'static str,
        decl: Span,
        entries: &'a [Entry],
        allowed: &[&str],
        diags: &mut Vec<Diagnostic>,
    ) -> Option<Self> {
        let mut ok = true;
        for e in entries {
            if !allowed.contains(&e.key.as_str()) {
                diags.push(Diagnostic::new(
                    DiagnosticKind::UnknownKey,
                    e.key_span,
                    format!("`{}` is not a {what} key; expected one of {}", e.key, allowed.join(", ")),
                ));
                ok = false;
            }
        }
        ok.then_some(Self { what, decl, entries })
    }

    fn get(&self, key: &str) -> Option<&'a Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    fn or(&self, key: &str, default: f64) -> f64 {
        self.get(key).map_or(default, |e| e.value)
    }

    fn span_of(&self, key: &str) -> Span {
        self.get(key).map_or(self.decl, |e| e.value_span)
    }

    fn required(&self, key: &str) -> Result<f64, Diagnostic> {
        self.get(key)
            .map(|e| e.value)
            .ok_or_else(|| Diagnostic::syntax(self.decl, format!("{} is missing `{key}=`", self.what)))
    }

    fn whole(&self, key: &str, default: u64, max: u64) -> Result<u64, Diagnostic> {
        let Some(e) = self.get(key) else { return Ok(default) };
        if e.value.fract() != 0.0 || e.value < 0.0 || e.value > max as f64 {
            return Err(Diagnostic::new(
                DiagnosticKind::InvariantViolation,
                e.value_span,
                format!("{key} = {} must be a whole number in 0..={max}", e.value),
            ));
        }
        Ok(e.value as u64)
    }

    fn invariant(&self, err: InvariantError) -> Diagnostic {
        Diagnostic::new(DiagnosticKind::InvariantViolation, self.span_of(err.field), err.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PumpDecl {
    pub name: String,
    pub config: PumpConfig,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveDecl {
    pub pump: String,
    pub spec: WaveformSpec,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunDuration {
    Seconds(f64),
    UntilStopped,
}

impl RunDuration {
    pub fn seconds(self) -> Option<f64> {
        match self {
            RunDuration::Seconds(s) => Some(s),
            RunDuration::UntilStopped => None,
        }
    }
}

/// A parsed gait program. All pumps share the START epoch, t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitProgram {
    /// In declaration order.
    pub pumps: Vec<PumpDecl>,
    /// Keyed by wire pump id.
    pub waves: BTreeMap<u8, WaveDecl>,
    pub run: RunDuration,
}

impl GaitProgram {
    pub fn empty() -> Self {
        Self { pumps: Vec::new(), waves: BTreeMap::new(), run: RunDuration::UntilStopped }
    }

    pub fn pump(&self, pump_id: u8) -> Option<&PumpDecl> {
        self.pumps.iter().find(|p| p.config.pump_id() == pump_id)
    }

    pub fn pump_by_name(&self, name: &str) -> Option<&PumpDecl> {
        self.pumps.iter().find(|p| p.name == name)
    }

    pub fn wave(&self, pump_id: u8) -> Option<&WaveformSpec> {
        self.waves.get(&pump_id).map(|w| &w.spec)
    }

    /// Pumps sorted by wire id.
    pub fn pumps_by_id(&self) -> Vec<&PumpDecl> {
        let mut v: Vec<_> = self.pumps.iter().collect();
        v.sort_by_key(|p| p.config.pump_id());
        v
    }
}

fn pump_config(id: u8, f: &Fields<'_>) -> Result<PumpConfig, Diagnostic> {
    let ex = PumpConfig::example(id);
    let (s, d) = (ex.syringe(), ex.drive());
    let steps = f.whole("steps_per_rev", u64::from(d.full_steps_per_rev()), u64::from(u32::MAX))?;
    let micro = f.whole("microsteps", u64::from(d.microstep_factor()), u64::from(u32::MAX))?;
    let invert = f.whole("invert", u64::from(d.invert_direction()), 1)? == 1;
    let syringe = SyringeSpec::new(
        f.or("bore_mm", s.bore_diameter()),
        f.or("max_travel_mm", s.max_travel()),
        f.or("dead_volume_ml", s.dead_volume()),
    )
    .map_err(|e| f.invariant(e))?;
    let drive = DriveSpec::new(
        f.or("pitch_mm", d.lead_screw_pitch()),
        steps as u32,
        micro as u32,
        f.or("max_step_rate", d.max_step_rate()),
        f.or("max_accel", d.max_accel()),
        invert,
    )
    .map_err(|e| f.invariant(e))?;
    PumpConfig::new(id, syringe, drive, f.or("soft_limit_mm", ex.soft_limit_margin())).map_err(|e| f.invariant(e))
}

fn wave_spec(shape: Shape, f: &Fields<'_>) -> Result<WaveformSpec, Diagnostic> {
    let period = f.required("period")?;
    let amplitude = f.required("amplitude_ml")?;
    let mut b = WaveformSpec::builder(shape, period, amplitude)
        .duty(f.or("duty", 0.5))
        .phase(f.or("phase", 0.0))
        .offset(f.or("offset_ml", 0.0));
    if let Some(r) = f.get("ramp") {
        b = b.ramp(r.value);
    }
    if f.get("cycles").is_some() {
        b = b.cycles(f.whole("cycles", 0, u64::from(u32::MAX))? as u32);
    }
    b.build().map_err(|e| f.invariant(e))
}

fn finish<T>(value: T, mut diags: Vec<Diagnostic>) -> Result<T, Vec<Diagnostic>> {
    if diags.is_empty() {
        Ok(value)
    } else {
        // stable: same-position diagnostics keep their discovery order
        diags.sort_by_key(|d| d.span);
        Err(diags)
    }
}

/// Parses a gait program, collecting every diagnostic rather than stopping
/// at the first.
pub fn parse_gait(text: &str) -> Result<GaitProgram, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    let stmts = parse_statements(text, &["pump", "wave", "run"], &mut diags);

    let mut program = GaitProgram::empty();
    let mut run_span: Option<Span> = None;
    let mut ids: BTreeMap<u8, (String, Span)> = BTreeMap::new();
    let mut names: BTreeMap<&str, Span> = BTreeMap::new();
    let mut declared = 0usize;

    for stmt in &stmts {
        match stmt {
            Stmt::Block { span, name, entries, .. } => {
                let index = declared;
                declared += 1;
                if let Some(&prev) = names.get(name.as_str()) {
                    diags.push(Diagnostic::new(
                        DiagnosticKind::DuplicatePump,
                        *span,
                        format!("pump `{name}` already declared at {prev}"),
                    ));
                    continue;
                }
                names.insert(name, *span);
                let Some(f) = Fields::new("pump", *span, entries, &PUMP_KEYS, &mut diags) else { continue };
                let id = match f.whole("id", index as u64, u64::from(MAX_PUMP_ID)) {
                    Ok(id) => id as u8,
                    Err(d) => {
                        diags.push(d);
                        continue;
                    }
                };
                if index > usize::from(MAX_PUMP_ID) && f.get("id").is_none() {
                    diags.push(Diagnostic::new(
                        DiagnosticKind::InvariantViolation,
                        *span,
                        format!("at most {} pumps fit on one bus", u32::from(MAX_PUMP_ID) + 1),
                    ));
                    continue;
                }
                if let Some((other, _)) = ids.get(&id) {
                    diags.push(Diagnostic::new(
                        DiagnosticKind::DuplicatePump,
                        f.span_of("id"),
                        format!("pump id {id} already used by `{other}`"),
                    ));
                    continue;
                }
                match pump_config(id, &f) {
                    Ok(config) => {
                        ids.insert(id, (name.clone(), *span));
                        program.pumps.push(PumpDecl { name: name.clone(), config, span: *span });
                    }
                    Err(d) => diags.push(d),
                }
            }
            Stmt::Run { span, seconds } => {
                if let Some(prev) = run_span {
                    diags.push(Diagnostic::syntax(*span, format!("run already given at {prev}")));
                    continue;
                }
                run_span = Some(*span);
                program.run = match seconds {
                    None => RunDuration::UntilStopped,
                    Some((s, vspan)) if *s >= 0.0 && s.is_finite() => {
                        let _ = vspan;
                        RunDuration::Seconds(*s)
                    }
                    Some((s, vspan)) => {
                        diags.push(Diagnostic::new(
                            DiagnosticKind::InvariantViolation,
                            *vspan,
                            format!("run = {s} violates run >= 0"),
                        ));
                        continue;
                    }
                };
            }
            Stmt::Wave { .. } => {}
        }
    }

    // waves may refer to pumps declared further down
    for stmt in &stmts {
        let Stmt::Wave { span, name, name_span, shape, entries } = stmt else { continue };
        let Some(f) = Fields::new("wave", *span, entries, &WAVE_KEYS, &mut diags) else { continue };
        let spec = match wave_spec(*shape, &f) {
            Ok(s) => s,
            Err(d) => {
                diags.push(d);
                continue;
            }
        };
        let Some(pump) = program.pump_by_name(name) else {
            // a pump that failed its own checks is not "undeclared"
            if !names.contains_key(name.as_str()) {
                diags.push(Diagnostic::new(
                    DiagnosticKind::WaveForUndeclaredPump,
                    *name_span,
                    format!("no `pump {name}` declared"),
                ));
            }
            continue;
        };
        let id = pump.config.pump_id();
        if let Some(prev) = program.waves.get(&id) {
            diags.push(Diagnostic::new(
                DiagnosticKind::DuplicateWave,
                *span,
                format!("pump `{name}` already has a wave at {}", prev.span),
            ));
            continue;
        }
        program.waves.insert(id, WaveDecl { pump: name.clone(), spec, span: *span });
    }

    finish(program, diags)
}

/// Simulated plants keyed by pump name, with an optional `default` entry
/// for pumps not listed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlantsFile {
    pub plants: BTreeMap<String, (PlantConfig, Span)>,
}

impl PlantsFile {
    pub const DEFAULT_NAME: &'static str = "default";

    pub fn for_pump(&self, name: &str) -> Option<&PlantConfig> {
        self.plants.get(name).or_else(|| self.plants.get(Self::DEFAULT_NAME)).map(|(c, _)| c)
    }
}

fn plant_config(f: &Fields<'_>) -> Result<PlantConfig, Diagnostic> {
    let d = PlantConfig::default();
    PlantConfig::new(
        f.or("ambient_pa", d.ambient_pressure()),
        f.or("syringe_gas_ml", d.syringe_initial_gas_volume()),
        f.or("voxel_ml", d.voxel_rest_volume()),
        f.or("compliance_ml_per_pa", d.voxel_compliance()),
        f.or("resistance_pa_s_per_ml", d.tube_resistance()),
        f.or("tube_ml", d.tube_volume()),
    )
    .and_then(|c| c.with_seal_volume(f.or("seal_ml", d.seal_volume())))
    .map_err(|e| f.invariant(e))
}

/// Parses `plant NAME { key=value ... }` blocks.
pub fn parse_plants(text: &str) -> Result<PlantsFile, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    let stmts = parse_statements(text, &["plant"], &mut diags);
    let mut out = PlantsFile::default();
    for stmt in &stmts {
        let Stmt::Block { span, name, entries, .. } = stmt else { continue };
        if let Some((_, prev)) = out.plants.get(name) {
            diags.push(Diagnostic::syntax(*span, format!("plant `{name}` already declared at {prev}")));
            continue;
        }
        let Some(f) = Fields::new("plant", *span, entries, &PLANT_KEYS, &mut diags) else { continue };
        match plant_config(&f) {
            Ok(c) => {
                out.plants.insert(name.clone(), (c, *span));
            }
            Err(d) => diags.push(d),
        }
    }
    finish(out, diags)
}
