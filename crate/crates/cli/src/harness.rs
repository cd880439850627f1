//! Runs the back-ends over an instance's sample-time sweep and checks each
//! synthesized controller with an independent simulation oracle and with the
//! other back-end's verifier.

use std::time::{Duration, Instant};

use serde::Serialize;

use safeloop::fixedpoint::FixedFormat;
use safeloop::model::{Controller, DiscretePlant};
use safeloop::noise::{build_noise_model, sampled_oracle};
use safeloop::verify_aa::{self, aa_cegis, AaConfig, AaVerdict};
use safeloop::verify_msv::{self, completeness_bound, msv_cegis, MsvConfig, SafetyVerdict, StageReport};

use crate::instance::Instance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Msv,
    Aa,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Msv => "msv",
            Backend::Aa => "aa",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendChoice {
    Msv,
    Aa,
    Both,
}

impl BackendChoice {
    pub fn backends(self) -> Vec<Backend> {
        match self {
            BackendChoice::Msv => vec![Backend::Msv],
            BackendChoice::Aa => vec![Backend::Aa],
            BackendChoice::Both => vec![Backend::Msv, Backend::Aa],
        }
    }
}

/// Oracle horizon is `ORACLE_HORIZON · k_bar` steps.
pub const ORACLE_HORIZON: usize = 10;
pub const ORACLE_SEEDS: u64 = 100;

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub backends: Vec<Backend>,
    /// First oracle seed; synthesis itself is seed-independent.
    pub seed: u64,
    /// Wall-clock budget per back-end run.
    pub time_budget: Duration,
    pub k_star: Option<usize>,
    pub schedule: Option<Vec<FixedFormat>>,
    pub oracle_seeds: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            backends: vec![Backend::Msv, Backend::Aa],
            seed: 0,
            time_budget: Duration::from_secs(120),
            k_star: None,
            schedule: None,
            oracle_seeds: ORACLE_SEEDS,
        }
    }
}

impl RunOptions {
    fn schedule(&self, inst: &Instance) -> Vec<FixedFormat> {
        self.schedule.clone().unwrap_or_else(|| inst.schedule.clone())
    }

    fn msv_config(&self, inst: &Instance, deadline: Instant) -> MsvConfig {
        let mut c = MsvConfig::new(inst.controller_format);
        c.dac = inst.dac;
        c.schedule = self.schedule(inst);
        c.routing = inst.routing;
        c.deadline = Some(deadline);
        c
    }

    fn aa_config(&self, inst: &Instance, deadline: Option<Instant>) -> AaConfig {
        let mut c = AaConfig::new(inst.controller_format);
        c.dac = inst.dac;
        c.routing = inst.routing;
        c.k_star = self.k_star;
        c.deadline = deadline;
        c.plant_precision = Some(self.finest(inst));
        c
    }

    /// Plant precision for single-shot verification and for the
    /// abstraction back-end, which does not escalate.
    fn finest(&self, inst: &Instance) -> FixedFormat {
        *self.schedule(inst).last().expect("schedule is nonempty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleSummary {
    pub runs: usize,
    pub steps: usize,
    pub violations: usize,
}

/// One attempted (benchmark, back-end, sample time) combination.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub benchmark: String,
    pub backend: Backend,
    pub order: usize,
    pub sample_time: f64,
    pub precision: Option<String>,
    pub controller: Option<Vec<f64>>,
    pub k_bar: Option<usize>,
    pub wall_time_s: f64,
    pub outcome: Outcome,
    pub diagnosis: Option<String>,
    pub oracle: Option<OracleSummary>,
    /// Verdict of the other back-end on the same controller.
    pub cross_check: Option<String>,
}

impl RunRow {
    pub fn succeeded(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<RunRow>,
}

impl Report {
    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
    }

    /// Fastest successful row per (benchmark, back-end).
    pub fn best(&self, benchmark: &str, backend: Backend) -> Option<&RunRow> {
        self.rows
            .iter()
            .filter(|r| r.benchmark == benchmark && r.backend == backend && r.succeeded())
            .min_by(|a, b| a.wall_time_s.total_cmp(&b.wall_time_s))
    }

    /// Every (benchmark, back-end) pair has at least one successful row.
    pub fn all_succeeded(&self) -> bool {
        self.rows.iter().all(|r| self.best(&r.benchmark, r.backend).is_some())
    }
}

/// Result of checking a given controller.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum VerifyOutcome {
    Safe { k_bar: Option<usize> },
    Counterexample { k: usize, x0: Vec<f64> },
    Rejected { reason: String },
}

impl VerifyOutcome {
    pub fn is_safe(&self) -> bool {
        matches!(self, VerifyOutcome::Safe { .. })
    }
}

impl std::fmt::Display for VerifyOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VerifyOutcome::Safe { k_bar: Some(k) } => write!(f, "SAFE (k_bar {k})"),
            VerifyOutcome::Safe { k_bar: None } => write!(f, "SAFE"),
            VerifyOutcome::Counterexample { k, x0 } => write!(f, "UNSAFE: counterexample at iteration {k} from {x0:?}"),
            VerifyOutcome::Rejected { reason } => write!(f, "REJECTED: {reason}"),
        }
    }
}

/// Checks `ctrl` with one back-end. The MSV stages run at the finest plant
/// precision of the schedule.
pub fn verify_gain(
    inst: &Instance,
    plant: &DiscretePlant,
    ctrl: &Controller,
    backend: Backend,
    opts: &RunOptions,
) -> Result<VerifyOutcome, String> {
    match backend {
        Backend::Aa => {
            let config = opts.aa_config(inst, None);
            match verify_aa::verify_controller(plant, ctrl, &inst.spec, &config, None).map_err(|e| e.to_string())? {
                AaVerdict::Pass(_) => Ok(VerifyOutcome::Safe { k_bar: completeness_bound(plant, ctrl, &inst.spec).ok() }),
                AaVerdict::RealCex { k, x0 } => Ok(VerifyOutcome::Counterexample { k, x0 }),
                AaVerdict::Unproven { k, x0 } => {
                    Ok(VerifyOutcome::Rejected { reason: format!("spurious suspect at iteration {k} from {x0:?} persists") })
                }
                AaVerdict::NoCertificate => Ok(VerifyOutcome::Rejected { reason: "no contraction certificate".into() }),
            }
        }
        Backend::Msv => {
            let report = verify_msv::verify_controller(plant, ctrl, &inst.spec, opts.finest(inst), inst.dac, inst.routing)
                .map_err(|e| e.to_string())?;
            Ok(match report {
                StageReport::Pass { k_bar } => VerifyOutcome::Safe { k_bar: Some(k_bar) },
                StageReport::Safety(SafetyVerdict::Counterexample { x0, step, .. }) => {
                    VerifyOutcome::Counterexample { k: step, x0 }
                }
                StageReport::Safety(SafetyVerdict::Pass) => VerifyOutcome::Rejected { reason: "safety stage".into() },
                StageReport::Precision(v) => VerifyOutcome::Rejected { reason: format!("precision stage: {v:?}") },
                StageReport::Complete(e) => VerifyOutcome::Rejected { reason: format!("completeness stage: {e}") },
            })
        }
    }
}

fn other(backend: Backend) -> Backend {
    match backend {
        Backend::Msv => Backend::Aa,
        Backend::Aa => Backend::Msv,
    }
}

struct Synthesized {
    controller: Controller,
    precision: Option<String>,
    k_bar: Option<usize>,
}

fn synthesize(inst: &Instance, plant: &DiscretePlant, backend: Backend, opts: &RunOptions) -> Result<Synthesized, String> {
    let deadline = Instant::now() + opts.time_budget;
    match backend {
        Backend::Msv => msv_cegis(plant, &inst.spec, &opts.msv_config(inst, deadline))
            .map(|s| Synthesized { controller: s.controller, precision: Some(s.precision.to_string()), k_bar: Some(s.k_bar) })
            .map_err(|e| e.diagnosis.to_string()),
        Backend::Aa => aa_cegis(plant, &inst.spec, &opts.aa_config(inst, Some(deadline)))
            .map(|s| {
                // the oracle horizon follows the same bound as the other back-end
                let k_bar = completeness_bound(plant, &s.controller, &inst.spec).ok();
                Synthesized { controller: s.controller, precision: Some(opts.finest(inst).to_string()), k_bar }
            })
            .map_err(|e| e.diagnosis.to_string()),
    }
}

/// Simulation oracle over every vertex and `opts.oracle_seeds` seeds for
/// `ORACLE_HORIZON · k_bar` steps.
pub fn oracle(inst: &Instance, plant: &DiscretePlant, ctrl: &Controller, k_bar: usize, opts: &RunOptions) -> OracleSummary {
    let noise = build_noise_model(inst.controller_format, inst.dac, ctrl);
    let steps = ORACLE_HORIZON * k_bar.max(1);
    let v = sampled_oracle(plant, ctrl, &inst.spec, &noise, steps, opts.seed..opts.seed + opts.oracle_seeds);
    OracleSummary { runs: v.runs, steps: v.steps, violations: v.violations }
}

fn run_one(inst: &Instance, ts: f64, backend: Backend, opts: &RunOptions) -> RunRow {
    let mut row = RunRow {
        benchmark: inst.name.clone(),
        backend,
        order: inst.states(),
        sample_time: ts,
        precision: None,
        controller: None,
        k_bar: None,
        wall_time_s: 0.0,
        outcome: Outcome::Failure,
        diagnosis: None,
        oracle: None,
        cross_check: None,
    };
    let start = Instant::now();
    let plant = match inst.plant(ts) {
        Ok(p) => p,
        Err(e) => {
            row.diagnosis = Some(format!("discretization: {e}"));
            return row;
        }
    };
    let synthesized = synthesize(inst, &plant, backend, opts);
    row.wall_time_s = start.elapsed().as_secs_f64();
    let s = match synthesized {
        Ok(s) => s,
        Err(d) => {
            row.diagnosis = Some(d);
            return row;
        }
    };
    row.controller = Some(s.controller.to_f64());
    row.precision = s.precision;
    row.k_bar = s.k_bar;
    let o = oracle(inst, &plant, &s.controller, s.k_bar.unwrap_or(1), opts);
    let oracle_safe = o.violations == 0;
    row.oracle = Some(o);
    row.cross_check = Some(match verify_gain(inst, &plant, &s.controller, other(backend), opts) {
        Ok(v) => v.to_string(),
        Err(e) => format!("error: {e}"),
    });
    if oracle_safe {
        row.outcome = Outcome::Success;
    } else {
        row.diagnosis = Some("simulation oracle found a violation".into());
    }
    row
}

/// Every back-end at every sample time of the instance.
pub fn run(inst: &Instance, opts: &RunOptions) -> Report {
    let mut report = Report::default();
    for &ts in &inst.sample_times {
        for &backend in &opts.backends {
            report.rows.push(run_one(inst, ts, backend, opts));
        }
    }
    report
}
