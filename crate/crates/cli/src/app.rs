//! Command-line surface. Exit codes: 0 when everything succeeded, 1 on any
//! synthesis or verification failure, 2 on usage, parse or validation
//! errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use safeloop::fixedpoint::FixedFormat;
use safeloop::model::Controller;
use safeloop::noise::{build_noise_model, LoopSimulator, NoisePolicy, PlantArithmetic};

use crate::harness::{self, BackendChoice, Report, RunOptions};
use crate::instance::{load_instance, Instance};
use crate::report::{render_json_lines, render_table, write_atomic};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "safeloop", version, about = "Synthesize and verify fixed-point state-feedback controllers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a controller for an instance.
    Synth(SynthArgs),
    /// Check a given gain vector against an instance.
    Verify(VerifyArgs),
    /// Emit a closed-loop trace as CSV.
    Simulate(SimulateArgs),
    /// Synthesize for every instance file in a directory.
    Bench(BenchArgs),
}

/// `I:F`, e.g. `17:7`.
pub fn parse_format(s: &str) -> Result<FixedFormat, String> {
    let (i, f) = s.split_once(':').ok_or_else(|| format!("expected I:F, got `{s}`"))?;
    let i: u32 = i.trim().parse().map_err(|_| format!("bad integer bits in `{s}`"))?;
    let f: u32 = f.trim().parse().map_err(|_| format!("bad fraction bits in `{s}`"))?;
    FixedFormat::new(i, f).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub backend: BackendChoice,
    /// First seed of the simulation oracle.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seconds per back-end run.
    #[arg(long, default_value_t = 120.0)]
    pub time_budget: f64,
    #[arg(long)]
    pub k_star: Option<usize>,
    /// Comma-separated `I:F` plant formats.
    #[arg(long, value_delimiter = ',', value_parser = parse_format)]
    pub precision_schedule: Option<Vec<FixedFormat>>,
    /// JSON-lines report destination.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

impl CommonArgs {
    fn options(&self) -> Result<RunOptions, String> {
        if !(self.time_budget > 0.0 && self.time_budget.is_finite()) {
            return Err(format!("--time-budget must be positive, got {}", self.time_budget));
        }
        Ok(RunOptions {
            backends: self.backend.backends(),
            seed: self.seed,
            time_budget: Duration::from_secs_f64(self.time_budget),
            k_star: self.k_star,
            schedule: self.precision_schedule.clone(),
            ..RunOptions::default()
        })
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub instance: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    /// CSV trace of the fastest successful controller from the first vertex.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub instance: PathBuf,
    /// Comma-separated gains, each exactly representable in the controller format.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub gains: Vec<f64>,
    /// Defaults to the first sample time of the instance.
    #[arg(long)]
    pub sample_time: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Zero,
    WorstCase,
    Sampled,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub instance: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub gains: Vec<f64>,
    /// Initial state; defaults to the lower corner of the initial box.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "sampled")]
    pub noise: NoiseArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub sample_time: Option<f64>,
    /// Defaults to standard output.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Directory of `*.json` instance files.
    pub dir: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Error that maps to an exit code.
#[derive(Debug)]
struct Fail(i32, String);

fn usage(msg: impl Into<String>) -> Fail {
    Fail(EXIT_USAGE, msg.into())
}

fn load(path: &Path) -> Result<Instance, Fail> {
    load_instance(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn controller(inst: &Instance, gains: &[f64]) -> Result<Controller, Fail> {
    if gains.len() != inst.states() {
        return Err(usage(format!("{} gains given for {} states", gains.len(), inst.states())));
    }
    Controller::from_f64(gains, inst.controller_format).map_err(|e| usage(e.to_string()))
}

fn sample_time(inst: &Instance, ts: Option<f64>) -> Result<f64, Fail> {
    match ts {
        None => Ok(inst.sample_times[0]),
        Some(t) if t > 0.0 && t.is_finite() => Ok(t),
        Some(t) => Err(usage(format!("--sample-time must be positive, got {t}"))),
    }
}

fn write_out(path: &Path, contents: &str) -> Result<(), Fail> {
    write_atomic(path, contents).map_err(|e| Fail(EXIT_FAILURE, format!("{}: {e}", path.display())))
}

fn emit_report(report: &Report, common: &CommonArgs, out: &mut dyn Write) -> Result<(), Fail> {
    let _ = write!(out, "{}", render_table(report));
    if let Some(p) = &common.report_out {
        write_out(p, &render_json_lines(report))?;
    }
    Ok(())
}

fn synth(args: &SynthArgs, out: &mut dyn Write) -> Result<i32, Fail> {
    let inst = load(&args.instance)?;
    let opts = args.common.options().map_err(usage)?;
    let report = harness::run(&inst, &opts);
    emit_report(&report, &args.common, out)?;
    if let Some(path) = &args.trace_out {
        let best = opts.backends.iter().find_map(|&b| report.best(&inst.name, b));
        if let Some(row) = best {
            let ctrl = controller(&inst, row.controller.as_deref().unwrap_or_default())?;
            let plant = inst.plant(row.sample_time).map_err(|e| Fail(EXIT_FAILURE, e.to_string()))?;
            let noise = build_noise_model(inst.controller_format, inst.dac, &ctrl);
            let sim = LoopSimulator::new(&plant, &ctrl, &inst.spec, PlantArithmetic::Real)
                .map_err(|e| Fail(EXIT_FAILURE, e.to_string()))?;
            let x0 = inst.spec.init_box().lo();
            let steps = harness::ORACLE_HORIZON * row.k_bar.unwrap_or(1).max(1);
            let trace = sim
                .simulate(&x0, steps, NoisePolicy::Sampled(opts.seed), &noise)
                .map_err(|e| Fail(EXIT_FAILURE, e.to_string()))?;
            write_out(path, &trace.to_csv())?;
        }
    }
    Ok(if report.all_succeeded() { EXIT_OK } else { EXIT_FAILURE })
}

fn verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<i32, Fail> {
    let inst = load(&args.instance)?;
    let opts = args.common.options().map_err(usage)?;
    let ctrl = controller(&inst, &args.gains)?;
    let ts = sample_time(&inst, args.sample_time)?;
    let plant = inst.plant(ts).map_err(|e| Fail(EXIT_FAILURE, e.to_string()))?;
    let mut all_safe = true;
    let mut lines = String::new();
    for backend in opts.backends.clone() {
        let verdict = harness::verify_gain(&inst, &plant, &ctrl, backend, &opts).map_err(|e| Fail(EXIT_FAILURE, e))?;
        all_safe &= verdict.is_safe();
        let _ = writeln!(out, "{backend}: {verdict}");
        let mut value = serde_json::to_value(&verdict).expect("verdict serializes");
        value["backend"] = serde_json::Value::String(backend.to_string());
        value["controller"] = serde_json::json!(ctrl.to_f64());
        lines.push_str(&value.to_string());
        lines.push('\n');
    }
    if let Some(p) = &args.common.report_out {
        write_out(p, &lines)?;
    }
    Ok(if all_safe { EXIT_OK } else { EXIT_FAILURE })
}

fn simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<i32, Fail> {
    let inst = load(&args.instance)?;
    let ctrl = controller(&inst, &args.gains)?;
    let ts = sample_time(&inst, args.sample_time)?;
    let plant = inst.plant(ts).map_err(|e| Fail(EXIT_FAILURE, e.to_string()))?;
    let x0 = args.x0.clone().unwrap_or_else(|| inst.spec.init_box().lo());
    if x0.len() != inst.states() {
        return Err(usage(format!("--x0 has {} coordinates for {} states", x0.len(), inst.states())));
    }
    if args.steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let policy = match args.noise {
        NoiseArg::Zero => NoisePolicy::Zero,
        NoiseArg::WorstCase => NoisePolicy::WorstCaseSign,
        NoiseArg::Sampled => NoisePolicy::Sampled(args.seed),
    };
    let noise = build_noise_model(inst.controller_format, inst.dac, &ctrl);
    let sim = LoopSimulator::new(&plant, &ctrl, &inst.spec, PlantArithmetic::Real).map_err(|e| Fail(EXIT_FAILURE, e.to_string()))?;
    let trace = sim.simulate(&x0, args.steps, policy, &noise).map_err(|e| Fail(EXIT_FAILURE, e.to_string()))?;
    match &args.trace_out {
        Some(p) => write_out(p, &trace.to_csv())?,
        None => {
            let _ = write!(out, "{}", trace.to_csv());
        }
    }
    Ok(if trace.first_violation(&inst.spec).is_none() { EXIT_OK } else { EXIT_FAILURE })
}

fn bench(args: &BenchArgs, out: &mut dyn Write) -> Result<i32, Fail> {
    let opts = args.common.options().map_err(usage)?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.dir)
        .map_err(|e| usage(format!("{}: {e}", args.dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("no instance files in {}", args.dir.display())));
    }
    let instances = paths.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let mut report = Report::default();
    for inst in &instances {
        report.extend(harness::run(inst, &opts));
    }
    emit_report(&report, &args.common, out)?;
    Ok(if report.all_succeeded() { EXIT_OK } else { EXIT_FAILURE })
}

/// Runs a parsed command, writing human-readable output to `out` and
/// diagnostics to standard error.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Verify(a) => verify(a, out),
        Command::Simulate(a) => simulate(a, out),
        Command::Bench(a) => bench(a, out),
    };
    match result {
        Ok(code) => code,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}
