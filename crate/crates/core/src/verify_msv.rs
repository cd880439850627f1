//! Multi-staged verification: SAFETY on the vertices of the initial box
//! with fixed-point plant arithmetic, PRECISION by interval unfolding of the
//! real plant, COMPLETE against the completeness threshold. The CEGIS loop
//! escalates plant precision whenever synthesis is unsatisfiable.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::fixedpoint::FixedFormat;
use crate::interval::{HyperBox, Interval, IntervalMatrix, Unfolding};
use crate::model::{closed_loop_interval, closed_loop_matrix, Controller, DiscretePlant, ModelError, SafetySpec};
use crate::noise::{build_noise_model, LoopSimulator, NoiseModel, NoisePolicy, NoiseRouting, PlantArithmetic, ViolationKind};
use crate::stability::{completeness_threshold, StabilityError};
use crate::synth::{
    synthesize_candidate, Counterexample, CounterexampleSet, SearchBudget, SpectralConstraint, SynthError, SynthProblem,
};

/// What went wrong on a failing vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyFailure {
    State(usize),
    Input,
    Overflow,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SafetyVerdict {
    Pass,
    Counterexample { x0: Vec<f64>, step: usize, failure: SafetyFailure },
}

/// Simulates `k` steps from every vertex of the initial box, vertices in
/// lexicographic order, with the controller in its own format, the plant in
/// `precision` and no noise. Input bounds are asserted, not clamped.
pub fn verify_safety(
    plant: &DiscretePlant,
    ctrl: &Controller,
    spec: &SafetySpec,
    precision: FixedFormat,
    k: usize,
) -> SafetyVerdict {
    assert!(k >= 1, "safety needs at least one step");
    let sim = match LoopSimulator::new(plant, ctrl, spec, PlantArithmetic::Fixed(precision)) {
        Ok(sim) => sim,
        Err(_) => {
            let x0 = spec.init_box().vertices().remove(0);
            return SafetyVerdict::Counterexample { x0, step: 0, failure: SafetyFailure::Overflow };
        }
    };
    for x0 in spec.init_box().vertices() {
        match sim.simulate(&x0, k, NoisePolicy::Zero, &NoiseModel::zero()) {
            Err(e) => return SafetyVerdict::Counterexample { x0, step: e.step, failure: SafetyFailure::Overflow },
            Ok(trace) => {
                if let Some(v) = trace.first_violation(spec) {
                    let failure = match v.kind {
                        ViolationKind::State(i) => SafetyFailure::State(i),
                        ViolationKind::Input => SafetyFailure::Input,
                    };
                    return SafetyVerdict::Counterexample { x0, step: v.k, failure };
                }
            }
        }
    }
    SafetyVerdict::Pass
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrecisionVerdict {
    Pass,
    /// `coord` is `None` for an input-bound violation.
    Fail { step: usize, coord: Option<usize> },
}

/// Interval replay of the real closed loop from the whole initial box. The
/// matrix intervals cover the discretization certificate plus `extra` per
/// entry; noise enters through `routing`.
pub fn verify_precision(
    plant: &DiscretePlant,
    ctrl: &Controller,
    spec: &SafetySpec,
    noise: &NoiseModel,
    routing: NoiseRouting,
    extra: f64,
    k: usize,
) -> Result<PrecisionVerdict, ModelError> {
    let a = closed_loop_interval(plant, ctrl, extra)?;
    let w = routing.state_noise(plant, noise);
    let mut unfolding = Unfolding::new(&a, spec.init_box(), &w);
    unfolding.extend(&a, &w, k);
    let neg_k: Vec<Interval> = ctrl.to_f64().iter().map(|&g| Interval::point(-g)).collect();
    for j in 0..=k {
        let b = unfolding.state_box(j);
        if let Some(i) = spec.state_box().coords().iter().zip(b.coords()).position(|(o, x)| !o.contains(x)) {
            return Ok(PrecisionVerdict::Fail { step: j, coord: Some(i) });
        }
        if j < k && !spec.input_bounds().contains(&unfolding.linear_image(&neg_k, j).add(&noise.bound())) {
            return Ok(PrecisionVerdict::Fail { step: j, coord: None });
        }
    }
    Ok(PrecisionVerdict::Pass)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompleteVerdict {
    Pass { k_bar: usize },
    NewBound(usize),
}

/// Largest unfolding depth tried when searching for a contraction horizon.
pub const CONTRACTION_CAP: usize = 4096;

/// Smallest `k >= 1` such that `A^k` maps the symmetric hull of `safe` into
/// its largest inscribed symmetric box, certified in interval arithmetic.
/// Then safety on steps `0..=k` extends to every later step by induction,
/// which is what the rotation argument needs and does not by itself deliver
/// for non-normal loops.
pub fn contraction_horizon(a_cl: &IntervalMatrix, safe: &HyperBox, cap: usize) -> Option<usize> {
    let outer: Vec<f64> = safe.coords().iter().map(Interval::mag).collect();
    let inner: Vec<f64> = safe.coords().iter().map(|c| c.lo().abs().min(c.hi().abs())).collect();
    if inner.iter().any(|&r| !(r > 0.0)) {
        return None;
    }
    let n = outer.len();
    let mut unfolding = Unfolding::new(a_cl, safe, &HyperBox::zeros(n));
    for k in 1..=cap {
        unfolding.extend(a_cl, &HyperBox::zeros(n), k);
        let mag = unfolding.power(k).mag();
        let maps_inside = (0..n).all(|i| {
            let reach = (0..n).fold(Interval::zero(), |acc, j| acc.add(&Interval::point(mag[(i, j)]).mul(&Interval::point(outer[j]))));
            reach.hi() <= inner[i]
        });
        if maps_inside {
            return Some(k);
        }
    }
    None
}

/// Larger of the rotation threshold and the contraction horizon of the
/// safe box; `CONTRACTION_CAP + 1` when no horizon is found.
pub fn completeness_bound(plant: &DiscretePlant, ctrl: &Controller, spec: &SafetySpec) -> Result<usize, StabilityError> {
    let a_cl = closed_loop_matrix(plant, ctrl)?;
    let t = completeness_threshold(&a_cl, plant.sample_time())?;
    let a = closed_loop_interval(plant, ctrl, 0.0)?;
    let horizon = contraction_horizon(&a, spec.state_box(), CONTRACTION_CAP).unwrap_or(CONTRACTION_CAP + 1);
    Ok(t.k_bar.max(horizon))
}

/// PASS iff `k` reaches [`completeness_bound`]; otherwise the bound.
pub fn verify_complete(plant: &DiscretePlant, ctrl: &Controller, spec: &SafetySpec, k: usize) -> Result<CompleteVerdict, StabilityError> {
    let k_bar = completeness_bound(plant, ctrl, spec)?;
    Ok(if k >= k_bar { CompleteVerdict::Pass { k_bar } } else { CompleteVerdict::NewBound(k_bar) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Synthesize,
    Safety,
    Precision,
    Complete,
    TubeCheck,
    Confirm,
    Refine,
    Escalate,
}

/// One record per CEGIS event.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub precision: Option<String>,
    pub candidate: Option<Vec<f64>>,
    pub counterexample: Option<Vec<f64>>,
    pub step: Option<usize>,
    pub outcome: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

impl RunLog {
    pub fn push(&mut self, record: RunRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Diagnosis {
    UnsatAtMaxPrecision,
    /// Synthesis found no candidate at the back-end's only precision.
    Unsat,
    Timeout,
    KBarExplosion { k_bar: usize },
    Unstable,
    RefinementExhausted,
    Infeasible,
}

impl std::fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnosis::UnsatAtMaxPrecision => write!(f, "UNSAT at maximum precision"),
            Diagnosis::Unsat => write!(f, "UNSAT"),
            Diagnosis::Timeout => write!(f, "timeout"),
            Diagnosis::KBarExplosion { k_bar } => write!(f, "completeness threshold {k_bar} exceeds the cap"),
            Diagnosis::Unstable => write!(f, "no stable closed loop"),
            Diagnosis::RefinementExhausted => write!(f, "refinement exhausted"),
            Diagnosis::Infeasible => write!(f, "spectral refinement infeasible"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("synthesis failed: {diagnosis}")]
pub struct CegisFailure {
    pub diagnosis: Diagnosis,
    pub log: RunLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsvSuccess {
    pub controller: Controller,
    pub precision: FixedFormat,
    pub k: usize,
    pub k_bar: usize,
    pub log: RunLog,
}

#[derive(Clone, Debug)]
pub struct MsvConfig {
    pub format: FixedFormat,
    pub dac: FixedFormat,
    pub schedule: Vec<FixedFormat>,
    pub routing: NoiseRouting,
    pub deadline: Option<Instant>,
    pub max_evaluations: usize,
    pub k_bar_cap: usize,
    /// Completeness-threshold limit imposed on synthesized candidates.
    pub synth_k_bar: usize,
}

pub fn default_schedule() -> Vec<FixedFormat> {
    [(13, 3), (17, 7), (21, 11), (25, 15)].iter().map(|&(i, f)| FixedFormat::new(i, f).expect("valid format")).collect()
}

impl MsvConfig {
    pub fn new(format: FixedFormat) -> Self {
        Self {
            format,
            dac: format,
            schedule: default_schedule(),
            routing: NoiseRouting::default(),
            deadline: None,
            max_evaluations: SearchBudget::default().max_evaluations,
            k_bar_cap: 4096,
            synth_k_bar: 128,
        }
    }
}

/// Outcome of the three stages on a fixed controller.
#[derive(Clone, Debug, PartialEq)]
pub enum StageReport {
    Pass { k_bar: usize },
    Safety(SafetyVerdict),
    Precision(PrecisionVerdict),
    Complete(String),
}

impl StageReport {
    pub fn passed(&self) -> bool {
        matches!(self, StageReport::Pass { .. })
    }
}

/// Runs SAFETY, PRECISION and COMPLETE for a given controller at depth
/// `k = k_bar` (at least 1), as used for cross-checking other back-ends.
pub fn verify_controller(
    plant: &DiscretePlant,
    ctrl: &Controller,
    spec: &SafetySpec,
    precision: FixedFormat,
    dac: FixedFormat,
    routing: NoiseRouting,
) -> Result<StageReport, ModelError> {
    let k_bar = match verify_complete(plant, ctrl, spec, 1) {
        Ok(CompleteVerdict::Pass { k_bar } | CompleteVerdict::NewBound(k_bar)) => k_bar,
        Err(e) => return Ok(StageReport::Complete(e.to_string())),
    };
    let k = k_bar.max(1);
    let safety = verify_safety(plant, ctrl, spec, precision, k);
    if safety != SafetyVerdict::Pass {
        return Ok(StageReport::Safety(safety));
    }
    let noise = build_noise_model(ctrl.format(), dac, ctrl);
    let p = verify_precision(plant, ctrl, spec, &noise, routing, precision.resolution(), k)?;
    if p != PrecisionVerdict::Pass {
        return Ok(StageReport::Precision(p));
    }
    Ok(StageReport::Pass { k_bar })
}

struct Logger {
    log: RunLog,
    iteration: usize,
    precision: Option<String>,
}

impl Logger {
    fn record(&mut self, phase: Phase, ctrl: Option<&Controller>, cex: Option<&[f64]>, step: Option<usize>, outcome: impl Into<String>) {
        self.log.push(RunRecord {
            iteration: self.iteration,
            phase,
            precision: self.precision.clone(),
            candidate: ctrl.map(Controller::to_f64),
            counterexample: cex.map(<[f64]>::to_vec),
            step,
            outcome: outcome.into(),
        });
    }

    fn fail(self, diagnosis: Diagnosis) -> CegisFailure {
        CegisFailure { diagnosis, log: self.log }
    }
}

/// The CEGIS loop: synthesize, then SAFETY, PRECISION, COMPLETE. Safety
/// counterexamples and precision failures feed back into synthesis (the
/// latter as flagged iterations); UNSAT escalates the plant precision and
/// clears the counterexamples. The first candidate at every precision is
/// `K = 0`.
pub fn msv_cegis(plant: &DiscretePlant, spec: &SafetySpec, config: &MsvConfig) -> Result<MsvSuccess, CegisFailure> {
    let n = plant.states();
    let mut lg = Logger { log: RunLog::default(), iteration: 0, precision: None };
    let timed_out = || config.deadline.is_some_and(|d| Instant::now() >= d);

    for &precision in &config.schedule {
        lg.precision = Some(precision.to_string());
        let mut cex = CounterexampleSet::new();
        let mut phi = SpectralConstraint::default();
        let mut k = 2 * n;
        let mut pending: Option<Controller> = Some(Controller::zero(n, config.format));
        loop {
            if timed_out() {
                return Err(lg.fail(Diagnosis::Timeout));
            }
            lg.iteration += 1;
            let ctrl = match pending.take() {
                Some(c) => c,
                None => {
                    let mut problem = SynthProblem::new(plant, spec, config.format);
                    problem.dac = config.dac;
                    problem.arithmetic = PlantArithmetic::Fixed(precision);
                    problem.horizon = k;
                    problem.routing = config.routing;
                    problem.distinct_eigenvalues = true;
                    problem.max_k_bar = Some(config.synth_k_bar);
                    problem.interval_extra = precision.resolution();
                    let budget = SearchBudget { max_evaluations: config.max_evaluations, deadline: config.deadline, ..SearchBudget::default() };
                    match synthesize_candidate(&problem, &cex, &phi, budget) {
                        Ok(c) => {
                            lg.record(Phase::Synthesize, Some(&c), None, None, "candidate");
                            c
                        }
                        Err(SynthError::Timeout(_)) => return Err(lg.fail(Diagnosis::Timeout)),
                        Err(e) => {
                            lg.record(Phase::Synthesize, None, None, None, e.to_string());
                            break;
                        }
                    }
                }
            };

            match verify_safety(plant, &ctrl, spec, precision, k) {
                SafetyVerdict::Pass => lg.record(Phase::Safety, Some(&ctrl), None, Some(k), "pass"),
                SafetyVerdict::Counterexample { x0, step, failure } => {
                    lg.record(Phase::Safety, Some(&ctrl), Some(&x0), Some(step), format!("counterexample ({failure:?})"));
                    let fresh = cex.insert(Counterexample::Initial(x0), spec.init_box()).unwrap_or(false);
                    if !fresh {
                        // synthesis already replays this vertex; no progress possible here
                        lg.record(Phase::Synthesize, Some(&ctrl), None, None, "stalled on a known counterexample");
                        break;
                    }
                    continue;
                }
            }

            let noise = build_noise_model(config.format, config.dac, &ctrl);
            let extra = precision.resolution();
            match verify_precision(plant, &ctrl, spec, &noise, config.routing, extra, k) {
                Ok(PrecisionVerdict::Pass) => lg.record(Phase::Precision, Some(&ctrl), None, Some(k), "pass"),
                Ok(PrecisionVerdict::Fail { step, coord }) => {
                    let what = coord.map_or("input".to_string(), |c| format!("state {c}"));
                    lg.record(Phase::Precision, Some(&ctrl), None, Some(step), format!("fail ({what})"));
                    // every later step must be certified as well
                    let fresh = (step.max(1)..=k).filter(|&j| phi.flag(j)).count() > 0;
                    if !fresh && !ctrl.gains().iter().all(|g| g.is_zero()) {
                        lg.record(Phase::Synthesize, Some(&ctrl), None, Some(step), "stalled on a flagged iteration");
                        break;
                    }
                    continue;
                }
                Err(e) => {
                    lg.record(Phase::Precision, Some(&ctrl), None, None, e.to_string());
                    break;
                }
            }

            match verify_complete(plant, &ctrl, spec, k) {
                Ok(CompleteVerdict::Pass { k_bar }) => {
                    lg.record(Phase::Complete, Some(&ctrl), None, Some(k_bar), "pass");
                    return Ok(MsvSuccess { controller: ctrl, precision, k, k_bar, log: lg.log });
                }
                Ok(CompleteVerdict::NewBound(k_bar)) => {
                    lg.record(Phase::Complete, Some(&ctrl), None, Some(k_bar), "new bound");
                    if k_bar > config.k_bar_cap {
                        return Err(lg.fail(Diagnosis::KBarExplosion { k_bar }));
                    }
                    k = k_bar;
                    pending = Some(ctrl);
                }
                Err(e) => lg.record(Phase::Complete, Some(&ctrl), None, None, e.to_string()),
            }
        }
        lg.record(Phase::Escalate, None, None, None, "next precision");
    }
    Err(lg.fail(Diagnosis::UnsatAtMaxPrecision))
}
