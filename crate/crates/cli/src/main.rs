//! `pumpctl`: validate, simulate, run, inspect and plot gait programs.
//!
//! Exit codes: 0 success, 1 domain error (bad program, infeasible wave,
//! plant or pump fault), 2 I/O or usage error.

mod plot;

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use pumpctl_core::motion::{check_feasible, check_trackable, DEFAULT_TICK};
use pumpctl_core::orchestrator::{
    run_serial, run_sim, write_telemetry_csv, RunError, RunOptions, RunOutput, SerialLink, SimBackend, DEFAULT_CADENCE,
};
use pumpctl_core::protocol::{
    compile_gait, dump_frames, flatten, parse_gait, parse_plants, CompileError, Diagnostic, GaitProgram,
};
use pumpctl_core::PlantConfig;

#[derive(Parser)]
#[command(name = "pumpctl", version, about = "Syringe-pump gait programs: check, simulate, run, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a program: syntax, stroke limits and drive feasibility.
    Validate {
        program: PathBuf,
        /// Control tick in seconds.
        #[arg(long, default_value_t = DEFAULT_TICK)]
        tick: f64,
    },
    /// Run a program on simulated pumps and write telemetry CSV.
    Simulate(RunArgs),
    /// Run a program on real pumps over a serial port.
    Run {
        #[command(flatten)]
        common: RunArgs,
        /// Serial device, e.g. /dev/ttyUSB0 or COM3.
        #[arg(long)]
        port: String,
        #[arg(long, default_value_t = 115_200)]
        baud: u32,
    },
    /// Print the annotated wire frames a program compiles to.
    Frames {
        program: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render telemetry CSV as an SVG, one panel per pump.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    program: PathBuf,
    /// Plant definitions for the simulator (`plant NAME { ... }` blocks).
    #[arg(long)]
    plants: Option<PathBuf>,
    /// Control tick in seconds.
    #[arg(long, default_value_t = DEFAULT_TICK)]
    tick: f64,
    /// Telemetry interval in seconds; a whole number of ticks.
    #[arg(long, default_value_t = DEFAULT_CADENCE)]
    cadence: f64,
    /// Run length in seconds, overriding the program's `run`.
    #[arg(long)]
    duration: Option<f64>,
    /// Telemetry CSV path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure already worth printing, with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn domain(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn io(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { program, tick } => validate(&program, tick),
        Command::Simulate(args) => simulate(&args),
        Command::Run { common, port, baud } => run(&common, &port, baud),
        Command::Frames { program, out } => frames(&program, out.as_deref()),
        Command::Plot { csv, out } => plot_cmd(&csv, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("{}", f.message.trim_end());
            }
            ExitCode::from(f.code)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(format!("pumpctl: cannot read {}: {e}", path.display())))
}

fn render_diagnostics(path: &Path, diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("{}:{d}\n", path.display())).collect()
}

fn parse(path: &Path) -> Result<GaitProgram, Failure> {
    parse_gait(&read(path)?).map_err(|d| Failure::domain(render_diagnostics(path, &d)))
}

/// Parses and checks every wave against its pump. Warnings for waves the
/// drive will slew-limit go to standard error; they do not fail.
fn checked(path: &Path, tick: f64) -> Result<GaitProgram, Failure> {
    let program = parse(path)?;
    let mut errors = String::new();
    for (id, wave) in &program.waves {
        let Some(pump) = program.pump(*id) else {
            continue;
        };
        let at = format!("{}:{}", path.display(), wave.span);
        match check_feasible(&pump.config, &wave.spec, tick) {
            Err(e) => errors.push_str(&format!("{at}: error: pump `{}`: {e}\n", pump.name)),
            Ok(()) => {
                if let Err(e) = check_trackable(&pump.config, &wave.spec, tick) {
                    eprintln!("{at}: warning: pump `{}` will be slew-limited: {e}", pump.name);
                }
            }
        }
    }
    if let Err(e) = compile_gait(&program) {
        errors.push_str(&compile_failure(path, &e));
        errors.push('\n');
    }
    if errors.is_empty() {
        Ok(program)
    } else {
        Err(Failure::domain(errors))
    }
}

fn compile_failure(path: &Path, e: &CompileError) -> String {
    let at = e.span.map_or_else(|| path.display().to_string(), |s| format!("{}:{s}", path.display()));
    format!("{at}: error: quantization overflow in `{}`: {}", e.pump, e.source)
}

fn validate(path: &Path, tick: f64) -> Result<(), Failure> {
    checked(path, tick).map(drop)
}

fn run_failure(e: RunError) -> Failure {
    match e {
        RunError::UnboundedRun => Failure::io("pumpctl: the program runs until stopped; pass --duration <s>"),
        RunError::InvalidOptions(m) => Failure::io(format!("pumpctl: {m}")),
        RunError::Io(e) => Failure::io(format!("pumpctl: serial i/o: {e}")),
        other => Failure::domain(format!("pumpctl: {other}")),
    }
}

fn options(args: &RunArgs) -> RunOptions {
    RunOptions { tick: args.tick, cadence: args.cadence, duration: args.duration, parallel: true }
}

fn sim_backend(program: &GaitProgram, plants: Option<&Path>) -> Result<SimBackend, Failure> {
    let Some(path) = plants else {
        return Ok(SimBackend::uniform(program, PlantConfig::default()));
    };
    let file = parse_plants(&read(path)?).map_err(|d| Failure::domain(render_diagnostics(path, &d)))?;
    SimBackend::from_plants(program, &file).map_err(run_failure)
}

/// Writes the telemetry, then the summary: to standard output when the
/// CSV goes to a file, to standard error when the CSV takes stdout.
fn report(out: &RunOutput, path: Option<&Path>) -> Result<(), Failure> {
    let write_err = |e: io::Error| Failure::io(format!("pumpctl: cannot write telemetry: {e}"));
    match path {
        Some(p) => {
            let file =
                File::create(p).map_err(|e| Failure::io(format!("pumpctl: cannot create {}: {e}", p.display())))?;
            let mut w = BufWriter::new(file);
            write_telemetry_csv(&out.records, &mut w).map_err(write_err)?;
            w.flush().map_err(write_err)?;
            print!("{}", out.report);
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            write_telemetry_csv(&out.records, &mut w).map_err(write_err)?;
            w.flush().map_err(write_err)?;
            eprint!("{}", out.report);
        }
    }
    Ok(())
}

fn on_interrupt(action: impl Fn() + Send + 'static) {
    // without a handler Ctrl-C still ends the process, just less politely
    let _ = ctrlc::set_handler(action);
}

fn simulate(args: &RunArgs) -> Result<(), Failure> {
    let program = checked(&args.program, args.tick)?;
    let backend = sim_backend(&program, args.plants.as_deref())?;
    let stop = backend.stop_handle();
    on_interrupt(move || stop.stop());
    let out = run_sim(&program, &backend, &options(args), |_| {}).map_err(run_failure)?;
    report(&out, args.out.as_deref())
}

fn run(args: &RunArgs, port: &str, baud: u32) -> Result<(), Failure> {
    let program = checked(&args.program, args.tick)?;
    if args.plants.is_some() {
        eprintln!("pumpctl: --plants only applies to simulation; ignored");
    }
    let link = SerialLink::open(port, baud).map_err(|e| Failure::io(format!("pumpctl: cannot open {port}: {e}")))?;
    let link = Arc::new(link);
    let stopper = Arc::clone(&link);
    on_interrupt(move || {
        if let Err(e) = stopper.stop_all() {
            eprintln!("pumpctl: STOP could not be sent: {e}");
        }
    });
    let out = run_serial(&program, &link, &options(args)).map_err(run_failure)?;
    report(&out, args.out.as_deref())
}

fn frames(path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let program = parse(path)?;
    let compiled = compile_gait(&program).map_err(|e| Failure::domain(compile_failure(path, &e)))?;
    let dump = dump_frames(&flatten(&compiled));
    match out {
        Some(p) => fs::write(p, dump).map_err(|e| Failure::io(format!("pumpctl: cannot write {}: {e}", p.display()))),
        None => {
            print!("{dump}");
            Ok(())
        }
    }
}

fn plot_cmd(csv: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let rows = plot::read_telemetry(csv).map_err(|e| match e {
        plot::PlotError::Io(m) => Failure::io(format!("pumpctl: cannot read {}: {m}", csv.display())),
        other => Failure::domain(format!("{}:{other}", csv.display())),
    })?;
    let svg = plot::render_svg(&rows);
    match out {
        Some(p) => fs::write(p, svg).map_err(|e| Failure::io(format!("pumpctl: cannot write {}: {e}", p.display()))),
        None => {
            print!("{svg}");
            Ok(())
        }
    }
}
