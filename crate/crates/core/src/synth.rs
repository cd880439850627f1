//! Candidate synthesis: a deterministic search over the raw-coefficient
//! lattice of the controller format.
//!
//! A candidate is feasible when its closed loop passes the exact Jury test
//! at the current spectral radius cap, it respects the gain bounds implied by
//! input saturation, every recorded counterexample replays safely, and every
//! flagged iteration is certified safe by interval unfolding.
//!
//! Search: multi-start best-improvement local search that, once feasible,
//! keeps descending on the spectral radius until a local minimum. Seeds are `K = 0`
//! followed by pole-placement gains for a fixed grid of stable spectra,
//! ordered by their 1-norm. Moves add `±2^j` raw units to one coordinate.
//! Candidates are ranked lexicographically by (stability excess,
//! counterexample violation, spectral radius), ties broken by the raw vector.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::time::Instant;

use nalgebra::DMatrix;
use num_traits::Signed;
use thiserror::Error;

use crate::exact::{rat, Rational};
use crate::fixedpoint::FixedFormat;
use crate::interval::{HyperBox, Interval, Unfolding};
use crate::model::{closed_loop_exact, closed_loop_interval, closed_loop_matrix, Controller, DiscretePlant, ModelError, SafetySpec};
use crate::noise::{build_noise_model, LoopSimulator, NoiseModel, NoisePolicy, NoiseRouting, PlantArithmetic, Trace};
use crate::stability::{char_poly, completeness_threshold, jury_check_margin, spectral_radius};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("counterexample {0:?} lies outside the initial box")]
    OutsideInitBox(Vec<f64>),
    #[error("counterexample has {got} coordinates, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("spectral radius cap {0} is outside (0, 1]")]
    BadRadius(f64),
    #[error("unsatisfiable: {0}")]
    Unsat(UnsatReason),
    #[error("search deadline reached after {0} evaluations")]
    Timeout(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnsatReason {
    /// A recorded initial state is already outside the safe box.
    InitialStateUnsafe { coord: usize },
    /// A state coordinate not driven by the input leaves the safe box after
    /// one step for every gain.
    GainIndependent { coord: usize },
    /// Every seed's local search ended without a feasible candidate.
    SearchExhausted { evaluations: usize },
}

impl fmt::Display for UnsatReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnsatReason::InitialStateUnsafe { coord } => write!(f, "initial state violates bound {coord} at step 0"),
            UnsatReason::GainIndependent { coord } => {
                write!(f, "coordinate {coord} leaves the safe box at step 1 independently of K")
            }
            UnsatReason::SearchExhausted { evaluations } => write!(f, "search exhausted after {evaluations} evaluations"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Counterexample {
    /// An initial state whose unfolding up to the current horizon failed.
    Initial(Vec<f64>),
    /// An initial state and the iteration at which it failed.
    Iteration { k: usize, x0: Vec<f64> },
}

impl Counterexample {
    pub fn x0(&self) -> &[f64] {
        match self {
            Counterexample::Initial(x0) | Counterexample::Iteration { x0, .. } => x0,
        }
    }
}

/// Duplicate-free list of counterexamples, all inside the initial box.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CounterexampleSet {
    entries: Vec<Counterexample>,
}

impl CounterexampleSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `false` if the entry was already present.
    pub fn insert(&mut self, cex: Counterexample, init: &HyperBox) -> Result<bool, SynthError> {
        if cex.x0().len() != init.dim() {
            return Err(SynthError::DimensionMismatch { expected: init.dim(), got: cex.x0().len() });
        }
        if !init.contains_point(cex.x0()) {
            return Err(SynthError::OutsideInitBox(cex.x0().to_vec()));
        }
        if self.entries.contains(&cex) {
            return Ok(false);
        }
        self.entries.push(cex);
        Ok(true)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Counterexample] {
        &self.entries
    }
}

/// `Σ_i |K_i| w_i ≤ budget` with `w_i = max(|x̲_i|, |x̄_i|)` over the initial
/// box and `budget = max(|u̲|, |ū|)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GainBounds {
    weights: Vec<f64>,
    budget: f64,
}

impl GainBounds {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    /// Bound on `Σ |K_i|` under the largest weight. Infinite when the
    /// initial box is the origin.
    pub fn l1_bound(&self) -> f64 {
        let w = self.weights.iter().copied().fold(0.0, f64::max);
        if w == 0.0 {
            f64::INFINITY
        } else {
            self.budget / w
        }
    }

    /// Per-entry box `|K_i| ≤ budget / w_i`.
    pub fn entry_bound(&self, i: usize) -> f64 {
        if self.weights[i] == 0.0 {
            f64::INFINITY
        } else {
            self.budget / self.weights[i]
        }
    }

    /// Evaluated exactly.
    pub fn admits(&self, gains: &[f64]) -> bool {
        let lhs = gains.iter().zip(&self.weights).fold(Rational::from_integer(0.into()), |acc, (k, w)| acc + rat(*k).abs() * rat(*w));
        lhs <= rat(self.budget)
    }
}

pub fn gain_bounds(spec: &SafetySpec) -> GainBounds {
    let weights = spec.init_box().coords().iter().map(Interval::mag).collect();
    GainBounds { weights, budget: spec.input_bounds().mag() }
}

/// Spectral radius cap plus iterations that must be certified safe by
/// interval unfolding from the whole initial box.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralConstraint {
    rho_max: f64,
    flagged: BTreeSet<usize>,
}

impl Default for SpectralConstraint {
    fn default() -> Self {
        Self { rho_max: 1.0, flagged: BTreeSet::new() }
    }
}

impl SpectralConstraint {
    pub fn new(rho_max: f64) -> Result<Self, SynthError> {
        if !(rho_max > 0.0 && rho_max <= 1.0) {
            return Err(SynthError::BadRadius(rho_max));
        }
        Ok(Self { rho_max, flagged: BTreeSet::new() })
    }

    pub fn rho_max(&self) -> f64 {
        self.rho_max
    }

    pub fn flagged(&self) -> &BTreeSet<usize> {
        &self.flagged
    }

    pub fn with_rho_max(mut self, rho_max: f64) -> Result<Self, SynthError> {
        self.rho_max = Self::new(rho_max)?.rho_max;
        Ok(self)
    }

    /// Returns `false` if `k` was already flagged.
    pub fn flag(&mut self, k: usize) -> bool {
        self.flagged.insert(k)
    }
}

/// Everything the search needs besides the counterexamples and the
/// spectral constraint.
#[derive(Clone, Debug)]
pub struct SynthProblem<'a> {
    pub plant: &'a DiscretePlant,
    pub spec: &'a SafetySpec,
    pub format: FixedFormat,
    pub dac: FixedFormat,
    /// Plant arithmetic for counterexample replay.
    pub arithmetic: PlantArithmetic,
    /// Unfolding depth for [`Counterexample::Initial`] entries.
    pub horizon: usize,
    pub routing: NoiseRouting,
    /// Reject closed loops with repeated eigenvalues, whose completeness
    /// threshold is undefined.
    pub distinct_eigenvalues: bool,
    /// Reject closed loops whose completeness threshold exceeds this.
    pub max_k_bar: Option<usize>,
    /// Per-entry widening of the closed-loop matrix in flagged-iteration
    /// checks, on top of the plant's certified radii.
    pub interval_extra: f64,
}

impl<'a> SynthProblem<'a> {
    pub fn new(plant: &'a DiscretePlant, spec: &'a SafetySpec, format: FixedFormat) -> Self {
        Self {
            plant,
            spec,
            format,
            dac: format,
            arithmetic: PlantArithmetic::Real,
            horizon: 2 * plant.states(),
            routing: NoiseRouting::default(),
            distinct_eigenvalues: false,
            max_k_bar: None,
            interval_extra: 0.0,
        }
    }

    pub fn noise_for(&self, ctrl: &Controller) -> NoiseModel {
        build_noise_model(self.format, self.dac, ctrl)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SearchBudget {
    pub max_evaluations: usize,
    pub deadline: Option<Instant>,
    /// Number of seeds whose descent must end feasible before the best
    /// result is returned.
    pub starts: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self { max_evaluations: 200_000, deadline: None, starts: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Score {
    stability: f64,
    violation: f64,
    rho: f64,
}

impl Score {
    fn feasible(&self) -> bool {
        self.stability == 0.0 && self.violation == 0.0
    }

    fn cmp(&self, other: &Score) -> Ordering {
        self.stability
            .total_cmp(&other.stability)
            .then(self.violation.total_cmp(&other.violation))
            .then(self.rho.total_cmp(&other.rho))
    }
}

// Excess assigned when the float radius is inside the cap but the exact
// check disagrees.
const BOUNDARY_EXCESS: f64 = 1e-12;
const OVERFLOW_PENALTY: f64 = 1e3;
const MAX_POLISH_STEPS: usize = 256;

fn box_excess(outer: &HyperBox, inner: &HyperBox) -> f64 {
    outer.coords().iter().zip(inner.coords()).map(|(o, i)| interval_excess(o, i)).sum()
}

fn interval_excess(outer: &Interval, inner: &Interval) -> f64 {
    let scale = outer.width().max(f64::MIN_POSITIVE);
    ((outer.lo() - inner.lo()).max(0.0) + (inner.hi() - outer.hi()).max(0.0)) / scale
}

fn trace_excess(trace: &Trace, spec: &SafetySpec) -> f64 {
    let last = trace.len() - 1;
    trace
        .entries()
        .iter()
        .enumerate()
        .map(|(idx, e)| {
            let s = box_excess(spec.state_box(), &HyperBox::point(&e.x));
            let u = if idx < last { interval_excess(&spec.input_bounds(), &Interval::point(e.u_demand)) } else { 0.0 };
            s + u
        })
        .fold(0.0, f64::max)
}

struct Evaluator<'p, 'a> {
    problem: &'p SynthProblem<'a>,
    cex: &'p CounterexampleSet,
    phi: &'p SpectralConstraint,
    cache: HashMap<Vec<i64>, Score>,
    evaluations: usize,
}

impl Evaluator<'_, '_> {
    fn score(&mut self, raw: &[i64]) -> Result<Score, SynthError> {
        if let Some(s) = self.cache.get(raw) {
            return Ok(*s);
        }
        self.evaluations += 1;
        let ctrl = Controller::from_raw(raw, self.problem.format)?;
        let s = self.score_uncached(&ctrl)?;
        self.cache.insert(raw.to_vec(), s);
        Ok(s)
    }

    fn score_uncached(&self, ctrl: &Controller) -> Result<Score, SynthError> {
        let p = self.problem;
        let a_cl = closed_loop_matrix(p.plant, ctrl)?;
        let rho = spectral_radius(&a_cl);
        let target = self.phi.rho_max * (1.0 - 1e-9);
        let mut stability = (rho - target).max(0.0);
        if stability == 0.0 && !stable_exact(p, ctrl, self.phi)? {
            stability = BOUNDARY_EXCESS;
        }
        if stability == 0.0 && (p.distinct_eigenvalues || p.max_k_bar.is_some()) {
            let within = match completeness_threshold(&a_cl, p.plant.sample_time()) {
                Ok(t) => p.max_k_bar.is_none_or(|cap| t.k_bar <= cap),
                Err(_) => false,
            };
            if !within {
                stability = BOUNDARY_EXCESS;
            }
        }
        if stability > 0.0 {
            return Ok(Score { stability, violation: 0.0, rho });
        }
        let violation = counterexample_excess(p, self.cex, ctrl)? + flagged_excess(p, self.phi, ctrl)?;
        Ok(Score { stability, violation, rho })
    }
}

fn stable_exact(p: &SynthProblem<'_>, ctrl: &Controller, phi: &SpectralConstraint) -> Result<bool, SynthError> {
    let poly = char_poly(&closed_loop_exact(p.plant, ctrl)?);
    Ok(jury_check_margin(&poly, phi.rho_max).expect("cap validated on construction"))
}

fn counterexample_excess(p: &SynthProblem<'_>, cex: &CounterexampleSet, ctrl: &Controller) -> Result<f64, SynthError> {
    if cex.is_empty() {
        return Ok(0.0);
    }
    let noise = p.noise_for(ctrl);
    let sim = match LoopSimulator::new(p.plant, ctrl, p.spec, p.arithmetic) {
        Ok(sim) => sim,
        Err(_) => return Ok(OVERFLOW_PENALTY * cex.len() as f64),
    };
    let mut total = 0.0;
    for c in cex.entries() {
        let steps = match c {
            Counterexample::Initial(_) => p.horizon,
            Counterexample::Iteration { k, .. } => *k,
        };
        if steps == 0 {
            total += box_excess(p.spec.state_box(), &HyperBox::point(c.x0()));
            continue;
        }
        for policy in [NoisePolicy::Zero, NoisePolicy::WorstCaseSign] {
            total += match sim.simulate(c.x0(), steps, policy, &noise) {
                Ok(trace) => trace_excess(&trace, p.spec),
                Err(e) => OVERFLOW_PENALTY * (1.0 + (steps - e.step.min(steps)) as f64 / steps as f64),
            };
        }
    }
    Ok(total)
}

fn flagged_excess(p: &SynthProblem<'_>, phi: &SpectralConstraint, ctrl: &Controller) -> Result<f64, SynthError> {
    let Some(&k_max) = phi.flagged().iter().next_back() else {
        return Ok(0.0);
    };
    let noise = p.noise_for(ctrl);
    let a = closed_loop_interval(p.plant, ctrl, p.interval_extra)?;
    let w = p.routing.state_noise(p.plant, &noise);
    let mut unfolding = Unfolding::new(&a, p.spec.init_box(), &w);
    unfolding.extend(&a, &w, k_max);
    let neg_k: Vec<Interval> = ctrl.to_f64().iter().map(|&g| Interval::point(-g)).collect();
    let states: f64 = phi.flagged().iter().map(|&k| box_excess(p.spec.state_box(), &unfolding.state_box(k))).sum();
    let inputs: f64 = (0..k_max)
        .map(|j| interval_excess(&p.spec.input_bounds(), &unfolding.linear_image(&neg_k, j).add(&noise.bound())))
        .sum();
    Ok(states + inputs)
}

/// Conditions that no gain can repair: an initial state outside the safe
/// box, or a coordinate with a zero input row that leaves the box after one
/// step.
fn gain_independent_defect(p: &SynthProblem<'_>, cex: &CounterexampleSet) -> Option<UnsatReason> {
    let b = p.plant.b_column();
    let zero = Controller::zero(p.plant.states(), p.format);
    let sim = LoopSimulator::new(p.plant, &zero, p.spec, p.arithmetic).ok()?;
    for c in cex.entries() {
        if let Some(coord) = p.spec.state_box().coords().iter().zip(c.x0()).position(|(iv, &v)| !iv.contains_value(v)) {
            return Some(UnsatReason::InitialStateUnsafe { coord });
        }
        let needs_step = match c {
            Counterexample::Initial(_) => p.horizon >= 1,
            Counterexample::Iteration { k, .. } => *k >= 1,
        };
        if !needs_step {
            continue;
        }
        let Ok(out) = sim.step(c.x0(), 0.0, 0.0) else { continue };
        for (i, (iv, &v)) in p.spec.state_box().coords().iter().zip(&out.x_next).enumerate() {
            if b[i] == 0.0 && !iv.contains_value(v) {
                return Some(UnsatReason::GainIndependent { coord: i });
            }
        }
    }
    None
}

/// Ackermann's formula `K = e_n^T C^{-1} p(A)` for a single-input plant.
/// `None` when the plant is not controllable.
pub fn pole_placement(a: &DMatrix<f64>, b: &DMatrix<f64>, poles: &[num_complex::Complex64]) -> Option<Vec<f64>> {
    let n = a.nrows();
    if poles.len() != n || b.ncols() != 1 {
        return None;
    }
    let mut ctrb = DMatrix::zeros(n, n);
    let mut col = b.clone();
    for j in 0..n {
        ctrb.set_column(j, &col.column(0));
        col = a * col;
    }
    let inv = ctrb.try_inverse()?;
    let ident = DMatrix::<f64>::identity(n, n);
    let mut p_a = ident.clone();
    let mut i = 0;
    while i < poles.len() {
        let z = poles[i];
        if z.im.abs() > 1e-12 {
            // conjugate pair: A^2 - 2 Re(z) A + |z|^2 I
            p_a = &p_a * (a * a - a * (2.0 * z.re) + &ident * z.norm_sqr());
            i += 2;
        } else {
            p_a = &p_a * (a - &ident * z.re);
            i += 1;
        }
    }
    let last = inv.row(n - 1).into_owned();
    let k = last * p_a;
    let k: Vec<f64> = k.iter().copied().collect();
    k.iter().all(|v| v.is_finite()).then_some(k)
}

const REAL_POLES: [f64; 8] = [0.0, 0.5, -0.5, 0.25, 0.75, -0.25, 0.9, 0.1];
const COMPLEX_POLES: [(f64, f64); 4] = [(0.5, PI / 4.0), (0.7, PI / 6.0), (0.3, PI / 2.0), (0.8, PI / 8.0)];

fn combinations(items: &[f64], r: usize) -> Vec<Vec<f64>> {
    if r == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], r - 1) {
            rest.insert(0, x);
            out.push(rest);
        }
    }
    out
}

fn target_spectra(n: usize) -> Vec<Vec<num_complex::Complex64>> {
    use num_complex::Complex64;
    let mut out: Vec<Vec<Complex64>> =
        combinations(&REAL_POLES, n).into_iter().map(|c| c.into_iter().map(|r| Complex64::new(r, 0.0)).collect()).collect();
    if n >= 2 {
        for &(r, th) in &COMPLEX_POLES {
            for reals in combinations(&REAL_POLES, n - 2) {
                let z = Complex64::from_polar(r, th);
                let mut s = vec![z, z.conj()];
                s.extend(reals.into_iter().map(|x| Complex64::new(x, 0.0)));
                out.push(s);
            }
        }
    }
    out
}

fn seeds(p: &SynthProblem<'_>, bounds: &GainBounds) -> Vec<Vec<i64>> {
    let n = p.plant.states();
    let scale = (p.format.frac_bits as f64).exp2();
    let max_raw = p.format.max_raw();
    let mut placed: Vec<Vec<i64>> = target_spectra(n)
        .iter()
        .filter_map(|s| pole_placement(p.plant.a(), p.plant.b(), s))
        .filter_map(|k| {
            let raw: Vec<i64> = k.iter().map(|v| (v * scale).round()).map(|v| v as i64).collect();
            let in_range = k.iter().all(|v| (v * scale).round().abs() <= max_raw as f64);
            in_range.then_some(raw)
        })
        .filter(|raw| bounds.admits(&raw.iter().map(|&r| r as f64 / scale).collect::<Vec<_>>()))
        .collect();
    placed.sort_by(|a, b| {
        let l1 = |v: &Vec<i64>| v.iter().map(|x| x.unsigned_abs()).sum::<u64>();
        l1(a).cmp(&l1(b)).then(a.cmp(b))
    });
    placed.dedup();
    let mut out = vec![vec![0; n]];
    out.extend(placed.into_iter().filter(|r| r.iter().any(|&x| x != 0)));
    out
}

/// Search for a gain vector satisfying every constraint; see the module
/// documentation for the search order. The result is re-checked by
/// [`validate_candidate`].
pub fn synthesize_candidate(
    problem: &SynthProblem<'_>,
    cex: &CounterexampleSet,
    phi: &SpectralConstraint,
    budget: SearchBudget,
) -> Result<Controller, SynthError> {
    if let Some(reason) = gain_independent_defect(problem, cex) {
        return Err(SynthError::Unsat(reason));
    }
    let bounds = gain_bounds(problem.spec);
    let fmt = problem.format;
    let scale = fmt.resolution();
    let max_raw = fmt.max_raw();
    let max_shift = 63 - max_raw.leading_zeros();
    let admits = |raw: &[i64]| bounds.admits(&raw.iter().map(|&r| r as f64 * scale).collect::<Vec<_>>());

    let mut ev = Evaluator { problem, cex, phi, cache: HashMap::new(), evaluations: 0 };
    let mut started: HashSet<Vec<i64>> = HashSet::new();
    let out_of_budget = |ev: &Evaluator<'_, '_>| -> Option<SynthError> {
        if budget.deadline.is_some_and(|d| Instant::now() >= d) {
            return Some(SynthError::Timeout(ev.evaluations));
        }
        (ev.evaluations >= budget.max_evaluations)
            .then_some(SynthError::Unsat(UnsatReason::SearchExhausted { evaluations: ev.evaluations }))
    };

    let mut results: Vec<(Score, Controller)> = Vec::new();
    let best_of = |results: Vec<(Score, Controller)>| {
        results.into_iter().min_by(|(sa, ka), (sb, kb)| sa.cmp(sb).then_with(|| ka.raw().cmp(&kb.raw()))).map(|(_, k)| k)
    };
    for seed in seeds(problem, &bounds) {
        if results.len() >= budget.starts.max(1) {
            break;
        }
        if !admits(&seed) || !started.insert(seed.clone()) {
            continue;
        }
        let mut cur = seed;
        let mut cur_score = ev.score(&cur)?;
        // once feasible, the descent continues on the spectral radius
        let mut accepted: Option<Controller> = None;
        let mut polish_steps = 0;
        loop {
            if cur_score.feasible() {
                let ctrl = Controller::from_raw(&cur, fmt)?;
                if validate_candidate(problem, cex, phi, &ctrl).is_err() {
                    break;
                }
                accepted = Some(ctrl);
                polish_steps += 1;
                if polish_steps > MAX_POLISH_STEPS {
                    break;
                }
            }
            if let Some(e) = out_of_budget(&ev) {
                if let Some(ctrl) = accepted {
                    results.push((ev.score(&ctrl.raw())?, ctrl));
                }
                return best_of(results).ok_or(e);
            }
            let mut best: Option<(Score, Vec<i64>)> = None;
            for i in 0..cur.len() {
                for j in 0..=max_shift {
                    for sign in [1i64, -1] {
                        let mut nb = cur.clone();
                        nb[i] += sign << j;
                        if nb[i].abs() > max_raw || !admits(&nb) {
                            continue;
                        }
                        let s = ev.score(&nb)?;
                        let better = match &best {
                            None => true,
                            Some((bs, braw)) => s.cmp(bs).then_with(|| nb.cmp(braw)) == Ordering::Less,
                        };
                        if better {
                            best = Some((s, nb));
                        }
                    }
                }
            }
            match best {
                Some((s, nb)) if s.cmp(&cur_score) == Ordering::Less => {
                    cur = nb;
                    cur_score = s;
                }
                _ => break,
            }
        }
        if let Some(ctrl) = accepted {
            let score = ev.score(&ctrl.raw())?;
            if score.rho == 0.0 {
                return Ok(ctrl);
            }
            results.push((score, ctrl));
        }
    }
    if let Some(ctrl) = best_of(results) {
        return Ok(ctrl);
    }
    Err(SynthError::Unsat(UnsatReason::SearchExhausted { evaluations: ev.evaluations }))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CandidateDefect {
    #[error("gain {0} is not in the controller format")]
    NotRepresentable(usize),
    #[error("closed loop has a root outside |z| < {0}")]
    Spectrum(f64),
    #[error("gain bound exceeded")]
    GainBound,
    #[error("counterexample {0} replays unsafely")]
    Counterexample(usize),
    #[error("flagged iteration {0} is not certified")]
    Flagged(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Re-checks the four candidate conditions directly, without the search's
/// scoring: exact representability, exact Jury test at the cap, exact gain
/// bound, counterexample replay under both noise policies, and flagged
/// iteration boxes.
pub fn validate_candidate(
    problem: &SynthProblem<'_>,
    cex: &CounterexampleSet,
    phi: &SpectralConstraint,
    ctrl: &Controller,
) -> Result<(), CandidateDefect> {
    if let Some(i) = ctrl.gains().iter().position(|g| g.format() != problem.format || !problem.format.contains(g.to_f64())) {
        return Err(CandidateDefect::NotRepresentable(i));
    }
    let poly = char_poly(&closed_loop_exact(problem.plant, ctrl)?);
    if !jury_check_margin(&poly, phi.rho_max()).unwrap_or(false) {
        return Err(CandidateDefect::Spectrum(phi.rho_max()));
    }
    if !gain_bounds(problem.spec).admits(&ctrl.to_f64()) {
        return Err(CandidateDefect::GainBound);
    }
    let noise = problem.noise_for(ctrl);
    for (idx, c) in cex.entries().iter().enumerate() {
        let steps = match c {
            Counterexample::Initial(_) => problem.horizon,
            Counterexample::Iteration { k, .. } => *k,
        };
        if !problem.spec.state_ok(c.x0()) {
            return Err(CandidateDefect::Counterexample(idx));
        }
        if steps == 0 {
            continue;
        }
        for policy in [NoisePolicy::Zero, NoisePolicy::WorstCaseSign] {
            let trace = crate::noise::simulate(problem.plant, ctrl, problem.spec, problem.arithmetic, c.x0(), steps, policy, &noise);
            if !matches!(trace, Ok(ref t) if t.first_violation(problem.spec).is_none()) {
                return Err(CandidateDefect::Counterexample(idx));
            }
        }
    }
    if let Some(&k_max) = phi.flagged().iter().next_back() {
        let a = closed_loop_interval(problem.plant, ctrl, problem.interval_extra)?;
        let w = problem.routing.state_noise(problem.plant, &noise);
        let mut unfolding = Unfolding::new(&a, problem.spec.init_box(), &w);
        unfolding.extend(&a, &w, k_max);
        let neg_k: Vec<Interval> = ctrl.to_f64().iter().map(|&g| Interval::point(-g)).collect();
        for j in 0..k_max {
            if !problem.spec.input_bounds().contains(&unfolding.linear_image(&neg_k, j).add(&noise.bound())) {
                return Err(CandidateDefect::Flagged(j + 1));
            }
        }
        for &k in phi.flagged() {
            if !crate::interval::contains(problem.spec.state_box(), &unfolding.state_box(k)).unwrap_or(false) {
                return Err(CandidateDefect::Flagged(k));
            }
        }
    }
    Ok(())
}
