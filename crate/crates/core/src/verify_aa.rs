//! Abstraction-based back-end: a reach tube made of exact interval powers up
//! to a horizon `K*` and a norm-certified tail for every later iteration.
//!
//! Every iteration `k ≥ K*` is `r + qK*` with `r < K*` and `q ≥ 1`, and
//! `x_{r+(q+1)K*} = A^{K*} x_{r+qK*} + S_{K*}` where `S_{K*}` is the noise sum
//! of one block. The tail works in a weighted norm `‖x‖_W = ‖W x‖₂`: with
//! `ρ̂ ≥ ‖W A^{K*} W⁻¹‖₂` certified in interval arithmetic, `R` bounding the
//! hull of the boxes before `K*` and `r_S = sup ‖W S_{K*}‖`, every later
//! state satisfies `‖W x‖ ≤ max(ρ̂ R + r_S, r_S / (1 − ρ̂))`. An approximate
//! `W` costs tightness, never soundness.

use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::fixedpoint::FixedFormat;
use crate::interval::{add_up, mul_up, sqrt_up, HyperBox, Interval, IntervalMatrix, Unfolding};
use crate::model::{closed_loop_exact, closed_loop_interval, closed_loop_matrix, Controller, DiscretePlant, ModelError, SafetySpec};
use crate::noise::{build_noise_model, LoopSimulator, NoiseModel, NoisePolicy, NoiseRouting, PlantArithmetic};
use crate::stability::{char_poly, completeness_threshold, eigenvalues, jury_check};
use crate::synth::{
    synthesize_candidate, Counterexample, CounterexampleSet, SearchBudget, SpectralConstraint, SynthError, SynthProblem,
};
use crate::verify_msv::{CegisFailure, Diagnosis, Phase, RunLog, RunRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AaError {
    #[error("no contraction certificate (best bound {0})")]
    NoContractionCertificate(f64),
    #[error("no spectral radius satisfies the flagged iterations")]
    Infeasible,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Choice of the weighting matrix `W` for the tail norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Inverse of the real modal matrix of the closed loop.
    Modal,
    /// Cholesky factor of the discrete Lyapunov solution `P - AᵀPA = I`.
    Lyapunov,
    Identity,
}

pub const CONDITIONINGS: [Conditioning; 3] = [Conditioning::Modal, Conditioning::Lyapunov, Conditioning::Identity];

/// Per-iteration boxes for `k = 0..=K*` (index 0 is the initial box), a tail
/// box valid for every `k > K*`, and their hull. Input enclosures
/// `-K x_k + N` accompany each box.
#[derive(Clone, Debug, PartialEq)]
pub struct ReachTube {
    pub boxes: Vec<HyperBox>,
    pub inputs: Vec<Interval>,
    pub tail: HyperBox,
    pub tail_input: Interval,
    pub hull: HyperBox,
    pub k_star: usize,
    /// Certified bound on `‖W A^{K*} W⁻¹‖₂`.
    pub rho_hat: f64,
    pub conditioning: Conditioning,
    /// Linear maps `mid(P_k)` used to pick witness vertices.
    witness_maps: Vec<DMatrix<f64>>,
    gains: Vec<f64>,
    init: HyperBox,
}

impl ReachTube {
    /// Box for iteration `k`, the tail box beyond `K*`.
    pub fn at(&self, k: usize) -> &HyperBox {
        self.boxes.get(k).unwrap_or(&self.tail)
    }
}

fn real_modal_matrix(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut eig = eigenvalues(a);
    eig.sort_by(|p, q| p.re.total_cmp(&q.re).then(p.im.total_cmp(&q.im)));
    let ac = a.map(|v| Complex64::new(v, 0.0));
    let mut cols: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(n);
    for lam in eig.iter().filter(|z| z.im >= 0.0) {
        let shifted = &ac - DMatrix::<Complex64>::identity(n, n) * *lam;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t?;
        let (idx, _) = svd.singular_values.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
        let v: nalgebra::DVector<Complex64> = v_t.row(idx).transpose().map(|z| z.conj());
        if lam.im.abs() < 1e-12 {
            let re = v.map(|z| z.re);
            let im = v.map(|z| z.im);
            cols.push(if re.norm() >= im.norm() { re } else { im });
        } else {
            cols.push(v.map(|z| z.re));
            cols.push(v.map(|z| z.im));
        }
    }
    if cols.len() != n {
        return None;
    }
    Some(DMatrix::from_columns(&cols))
}

fn lyapunov_factor(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - at.kronecker(&at);
    let rhs = nalgebra::DVector::from_iterator(n * n, DMatrix::<f64>::identity(n, n).iter().copied());
    let vec_p = lhs.lu().solve(&rhs)?;
    let p = DMatrix::from_column_slice(n, n, vec_p.as_slice());
    let p = (&p + p.transpose()) * 0.5;
    let l = p.cholesky()?.l();
    Some(l.transpose())
}

/// Weighting matrix for the tail norm, if the conditioning applies.
pub fn weighting(a_cl: &DMatrix<f64>, conditioning: Conditioning) -> Option<DMatrix<f64>> {
    let n = a_cl.nrows();
    let w = match conditioning {
        Conditioning::Modal => real_modal_matrix(a_cl)?.try_inverse()?,
        Conditioning::Lyapunov => lyapunov_factor(a_cl)?,
        Conditioning::Identity => DMatrix::identity(n, n),
    };
    w.iter().all(|v| v.is_finite()).then_some(w)
}

/// Upper bound on `‖M‖₂` from the Gershgorin bound on `MᵀM`.
fn spectral_norm_bound(m: &IntervalMatrix) -> f64 {
    let mtm = m.transposed().mul(m);
    let n = mtm.nrows();
    let bound = (0..n).map(|i| mtm.row(i).iter().fold(0.0, |acc, x| add_up(acc, x.mag()))).fold(0.0, f64::max);
    sqrt_up(bound)
}

/// `sup ‖W x‖₂` over a box.
fn weighted_radius(w: &IntervalMatrix, b: &HyperBox) -> f64 {
    let img = w.mul_box(b);
    sqrt_up(img.coords().iter().fold(0.0, |acc, c| add_up(acc, mul_up(c.mag(), c.mag()))))
}

/// Reach tube of the closed loop under noise routed by `routing`.
pub fn reach_tube(
    plant: &DiscretePlant,
    ctrl: &Controller,
    spec: &SafetySpec,
    noise: &NoiseModel,
    routing: NoiseRouting,
    k_star: usize,
    conditioning: Conditioning,
) -> Result<ReachTube, AaError> {
    assert!(k_star >= 1, "the tube needs a positive horizon");
    let a = closed_loop_interval(plant, ctrl, 0.0)?;
    let w_noise = routing.state_noise(plant, noise);
    let mut unfolding = Unfolding::new(&a, spec.init_box(), &w_noise);
    unfolding.extend(&a, &w_noise, k_star);
    let neg_k: Vec<Interval> = ctrl.to_f64().iter().map(|&g| Interval::point(-g)).collect();
    let boxes: Vec<HyperBox> = (0..=k_star).map(|k| unfolding.state_box(k)).collect();
    let inputs: Vec<Interval> = (0..=k_star).map(|k| unfolding.linear_image(&neg_k, k).add(&noise.bound())).collect();

    let a_mid = closed_loop_matrix(plant, ctrl)?;
    let w = weighting(&a_mid, conditioning).ok_or(AaError::NoContractionCertificate(f64::INFINITY))?;
    let wi = IntervalMatrix::from_point(&w);
    let w_inv = wi.inverse().map_err(|_| AaError::NoContractionCertificate(f64::INFINITY))?;
    let rho_hat = spectral_norm_bound(&wi.mul(unfolding.power(k_star)).mul(&w_inv));
    if !(rho_hat < 1.0) {
        return Err(AaError::NoContractionCertificate(rho_hat));
    }
    let head = boxes[1..k_star].iter().fold(boxes[0].clone(), |h, b| h.hull(b));
    let r_head = weighted_radius(&wi, &head);
    let r_s = weighted_radius(&wi, unfolding.noise_sum(k_star));
    let one_minus = Interval::point(1.0).sub(&Interval::point(rho_hat)).lo();
    let limit = r_s / one_minus;
    let limit = if limit.is_finite() && limit > 0.0 { limit.next_up() } else { limit };
    let radius = add_up(mul_up(rho_hat, r_head), r_s).max(limit);
    let n = plant.states();
    let tail = HyperBox::new(
        (0..n)
            .map(|i| {
                let row = w_inv.row(i).iter().fold(0.0, |acc, x| add_up(acc, mul_up(x.mag(), x.mag())));
                Interval::symmetric(mul_up(sqrt_up(row), radius))
            })
            .collect(),
    );
    let tail_input = neg_k
        .iter()
        .zip(tail.coords())
        .fold(Interval::zero(), |acc, (c, x)| acc.add(&c.mul(x)))
        .add(&noise.bound());
    let hull = boxes.iter().fold(tail.clone(), |h, b| h.hull(b));
    let witness_maps = (0..=k_star).map(|k| unfolding.power(k).mid()).collect();
    Ok(ReachTube {
        boxes,
        inputs,
        tail,
        tail_input,
        hull,
        k_star,
        rho_hat,
        conditioning,
        witness_maps,
        gains: ctrl.to_f64(),
        init: spec.init_box().clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum TubeVerdict {
    Pass,
    /// `k = K* + 1` marks a violation of the tail box.
    Suspect { k: usize, x0: Vec<f64> },
}

/// Vertex of `init` extremizing `c · x`; zero coefficients pick the lower
/// bound.
fn extreme_vertex(init: &HyperBox, c: &[f64], maximize: bool) -> Vec<f64> {
    init.coords()
        .iter()
        .zip(c)
        .map(|(iv, &ci)| {
            let up = if maximize { ci > 0.0 } else { ci < 0.0 };
            if up {
                iv.hi()
            } else {
                iv.lo()
            }
        })
        .collect()
}

pub fn check_tube(tube: &ReachTube, spec: &SafetySpec) -> TubeVerdict {
    let safe = spec.state_box();
    let ubounds = spec.input_bounds();
    let last = tube.k_star;
    for k in 0..=last + 1 {
        let (b, u) = if k <= last { (&tube.boxes[k], tube.inputs[k]) } else { (&tube.tail, tube.tail_input) };
        let map = &tube.witness_maps[k.min(last)];
        for (i, (o, x)) in safe.coords().iter().zip(b.coords()).enumerate() {
            if !o.contains(x) {
                let c: Vec<f64> = map.row(i).iter().copied().collect();
                let maximize = x.hi() > o.hi();
                return TubeVerdict::Suspect { k, x0: extreme_vertex(&tube.init, &c, maximize) };
            }
        }
        if !ubounds.contains(&u) {
            let c: Vec<f64> = (0..map.ncols()).map(|j| -(0..map.nrows()).map(|r| tube.gains[r] * map[(r, j)]).sum::<f64>()).collect();
            let maximize = u.hi() > ubounds.hi();
            return TubeVerdict::Suspect { k, x0: extreme_vertex(&tube.init, &c, maximize) };
        }
    }
    TubeVerdict::Pass
}

#[derive(Clone, Debug, PartialEq)]
pub enum Confirmation {
    RealCex { k: usize, x0: Vec<f64> },
    Spurious,
}

/// Concrete replay of a suspect with worst-case-sign noise. A tail suspect
/// is replayed for `10 (K* + 1)` steps.
pub fn confirm_or_refine(
    suspect: (usize, &[f64]),
    k_star: usize,
    plant: &DiscretePlant,
    ctrl: &Controller,
    spec: &SafetySpec,
    noise: &NoiseModel,
) -> Confirmation {
    let (k, x0) = suspect;
    if !spec.state_ok(x0) {
        return Confirmation::RealCex { k: 0, x0: x0.to_vec() };
    }
    let steps = if k > k_star { 10 * (k_star + 1) } else { k.max(1) };
    let Ok(sim) = LoopSimulator::new(plant, ctrl, spec, PlantArithmetic::Real) else {
        return Confirmation::Spurious;
    };
    for policy in [NoisePolicy::WorstCaseSign, NoisePolicy::Zero] {
        match sim.simulate(x0, steps, policy, noise) {
            Ok(trace) => {
                if let Some(v) = trace.first_violation(spec) {
                    return Confirmation::RealCex { k: v.k, x0: x0.to_vec() };
                }
            }
            Err(e) => return Confirmation::RealCex { k: e.step, x0: x0.to_vec() },
        }
    }
    Confirmation::Spurious
}

/// Scalar geometry for spectral refinement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineGeometry {
    pub init_radius: f64,
    pub noise_radius: f64,
    pub safe_radius: f64,
}

impl RefineGeometry {
    pub fn new(spec: &SafetySpec, noise_box: &HyperBox) -> Self {
        Self { init_radius: spec.init_box().mag(), noise_radius: noise_box.mag(), safe_radius: spec.safe_radius() }
    }
}

const BISECTION_TOL: f64 = 1e-4;

/// Largest `ρ ∈ (0, 1]` with `ρ^k r0 + rN / (1 − ρ) ≤ safe`, to `1e-4`.
fn max_rho(k: usize, g: &RefineGeometry) -> Option<f64> {
    let f = |rho: f64| {
        let noise = if g.noise_radius == 0.0 { 0.0 } else { g.noise_radius / (1.0 - rho) };
        rho.powi(k as i32) * g.init_radius + noise
    };
    if g.noise_radius == 0.0 && f(1.0) <= g.safe_radius {
        return Some(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    if f(lo) > g.safe_radius {
        return None;
    }
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if f(mid) <= g.safe_radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo > 0.0).then_some(lo)
}

/// Tightens the radius cap so the certified decay meets every flagged
/// iteration and records those iterations.
pub fn refine_spectrum(
    cex: &[(usize, Vec<f64>)],
    current: &SpectralConstraint,
    geometry: &RefineGeometry,
) -> Result<SpectralConstraint, AaError> {
    assert!(!cex.is_empty(), "refinement needs a counterexample");
    let mut rho = current.rho_max();
    for (k, _) in cex {
        rho = rho.min(max_rho(*k, geometry).ok_or(AaError::Infeasible)?);
    }
    let mut out = current.clone().with_rho_max(rho.min(1.0)).map_err(|_| AaError::Infeasible)?;
    for (k, _) in cex {
        out.flag(*k);
    }
    Ok(out)
}

pub fn default_k_star(k_bar: Option<usize>) -> usize {
    k_bar.map_or(32, |k| (2 * k).max(32))
}

#[derive(Clone, Debug)]
pub struct AaConfig {
    pub format: FixedFormat,
    pub dac: FixedFormat,
    pub routing: NoiseRouting,
    /// Fixed horizon; `None` uses [`default_k_star`].
    pub k_star: Option<usize>,
    pub refinement_cap: usize,
    pub deadline: Option<Instant>,
    pub max_evaluations: usize,
    pub synth_k_bar: usize,
    /// Fixed-point plant representation; its resolution widens every entry
    /// of `A_d` and `B_d` in the tube, as in the multi-staged PRECISION stage.
    pub plant_precision: Option<FixedFormat>,
}

impl AaConfig {
    pub fn new(format: FixedFormat) -> Self {
        Self {
            format,
            dac: format,
            routing: NoiseRouting::default(),
            k_star: None,
            refinement_cap: 4,
            deadline: None,
            max_evaluations: SearchBudget::default().max_evaluations,
            synth_k_bar: 128,
            plant_precision: None,
        }
    }

    fn plant_margin(&self) -> f64 {
        self.plant_precision.map_or(0.0, |p| p.resolution())
    }
}

/// Result of checking one controller with refinement.
#[derive(Clone, Debug, PartialEq)]
pub enum AaVerdict {
    Pass(Box<ReachTube>),
    RealCex { k: usize, x0: Vec<f64> },
    /// Suspects stayed spurious through every refinement.
    Unproven { k: usize, x0: Vec<f64> },
    NoCertificate,
}

/// Tube, check, and concrete confirmation with up to `refinement_cap`
/// spurious rounds; each round doubles `K*` and moves to the next
/// conditioning.
pub fn verify_controller(
    plant: &DiscretePlant,
    ctrl: &Controller,
    spec: &SafetySpec,
    config: &AaConfig,
    log: Option<&mut RunLog>,
) -> Result<AaVerdict, AaError> {
    check_controller(&plant.widened(config.plant_margin()), ctrl, spec, config, log)
}

/// [`verify_controller`] on an already widened plant.
fn check_controller(
    plant: &DiscretePlant,
    ctrl: &Controller,
    spec: &SafetySpec,
    config: &AaConfig,
    log: Option<&mut RunLog>,
) -> Result<AaVerdict, AaError> {
    let mut sink = RunLog::default();
    let log = log.unwrap_or(&mut sink);
    let noise = build_noise_model(config.format, config.dac, ctrl);
    let a_cl = closed_loop_matrix(plant, ctrl)?;
    let k_bar = completeness_threshold(&a_cl, plant.sample_time()).ok().map(|t| t.k_bar);
    let stable = jury_check(&char_poly(&closed_loop_exact(plant, ctrl)?));
    let mut k_star = config.k_star.unwrap_or_else(|| default_k_star(k_bar));
    let mut cond = 0;
    let mut last_suspect = None;
    let record = |log: &mut RunLog, phase, step, cex: Option<&[f64]>, outcome: String| {
        log.push(RunRecord {
            iteration: 0,
            phase,
            precision: None,
            candidate: Some(ctrl.to_f64()),
            counterexample: cex.map(<[f64]>::to_vec),
            step,
            outcome,
        })
    };
    for round in 0..=config.refinement_cap {
        let tube = (0..CONDITIONINGS.len())
            .map(|i| CONDITIONINGS[(cond + i) % CONDITIONINGS.len()])
            .find_map(|c| reach_tube(plant, ctrl, spec, &noise, config.routing, k_star, c).ok());
        let Some(tube) = tube else {
            record(log, Phase::TubeCheck, Some(k_star), None, "no contraction certificate".into());
            // a Schur-stable loop contracts over a long enough block
            if !stable || round == config.refinement_cap {
                return Ok(AaVerdict::NoCertificate);
            }
            k_star *= 2;
            continue;
        };
        match check_tube(&tube, spec) {
            TubeVerdict::Pass => {
                record(log, Phase::TubeCheck, Some(k_star), None, format!("pass (rho_hat {:.6})", tube.rho_hat));
                return Ok(AaVerdict::Pass(Box::new(tube)));
            }
            TubeVerdict::Suspect { k, x0 } => {
                record(log, Phase::TubeCheck, Some(k), Some(&x0), "suspect".into());
                match confirm_or_refine((k, &x0), k_star, plant, ctrl, spec, &noise) {
                    Confirmation::RealCex { k, x0 } => {
                        record(log, Phase::Confirm, Some(k), Some(&x0), "real counterexample".into());
                        return Ok(AaVerdict::RealCex { k, x0 });
                    }
                    Confirmation::Spurious => {
                        record(log, Phase::Confirm, Some(k), Some(&x0), "spurious".into());
                        last_suspect = Some((k, x0));
                        k_star *= 2;
                        cond += 1;
                    }
                }
            }
        }
    }
    Ok(match last_suspect {
        Some((k, x0)) => AaVerdict::Unproven { k, x0 },
        None => AaVerdict::NoCertificate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AaSuccess {
    pub controller: Controller,
    pub tube: ReachTube,
    pub log: RunLog,
}

/// Guards against a search that keeps producing fresh unsafe candidates.
const MAX_ITERATIONS: usize = 256;

/// Synthesize, build the tube, check it, confirm suspects and refine the
/// spectrum until a candidate's tube passes. The first candidate is `K = 0`.
pub fn aa_cegis(plant: &DiscretePlant, spec: &SafetySpec, config: &AaConfig) -> Result<AaSuccess, CegisFailure> {
    let widened = plant.widened(config.plant_margin());
    let plant = &widened;
    let n = plant.states();
    let mut log = RunLog::default();
    let fail = |diagnosis, log| Err(CegisFailure { diagnosis, log });
    let mut cex = CounterexampleSet::new();
    let mut phi = SpectralConstraint::default();
    let mut confirmed: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut pending = Some(Controller::zero(n, config.format));
    let mut iteration = 0;
    loop {
        if config.deadline.is_some_and(|d| Instant::now() >= d) {
            return fail(Diagnosis::Timeout, log);
        }
        iteration += 1;
        if iteration > MAX_ITERATIONS {
            return fail(Diagnosis::RefinementExhausted, log);
        }
        let ctrl = match pending.take() {
            Some(c) => c,
            None => {
                let mut problem = SynthProblem::new(plant, spec, config.format);
                problem.dac = config.dac;
                problem.routing = config.routing;
                problem.distinct_eigenvalues = true;
                problem.max_k_bar = Some(config.synth_k_bar);
                let budget = SearchBudget { max_evaluations: config.max_evaluations, deadline: config.deadline, ..SearchBudget::default() };
                match synthesize_candidate(&problem, &cex, &phi, budget) {
                    Ok(c) => c,
                    Err(SynthError::Timeout(_)) => return fail(Diagnosis::Timeout, log),
                    Err(e) => {
                        log.push(record(iteration, Phase::Synthesize, None, None, None, e.to_string()));
                        return fail(Diagnosis::Unsat, log);
                    }
                }
            }
        };
        log.push(record(iteration, Phase::Synthesize, Some(&ctrl), None, None, "candidate".into()));
        let stable = closed_loop_matrix(plant, &ctrl)
            .ok()
            .is_some_and(|a| completeness_threshold(&a, plant.sample_time()).is_ok());
        if !stable {
            log.push(record(iteration, Phase::TubeCheck, Some(&ctrl), None, None, "not stable with distinct eigenvalues".into()));
            continue;
        }
        let mut sub = RunLog::default();
        let verdict = match check_controller(plant, &ctrl, spec, config, Some(&mut sub)) {
            Ok(v) => v,
            Err(e) => {
                log.push(record(iteration, Phase::TubeCheck, Some(&ctrl), None, None, e.to_string()));
                return fail(Diagnosis::RefinementExhausted, log);
            }
        };
        log.records.extend(sub.records.into_iter().map(|mut r| {
            r.iteration = iteration;
            r
        }));
        let noise = build_noise_model(config.format, config.dac, &ctrl);
        let geometry = RefineGeometry::new(spec, &config.routing.state_noise(plant, &noise));
        match verdict {
            AaVerdict::Pass(tube) => return Ok(AaSuccess { controller: ctrl, tube: *tube, log }),
            AaVerdict::RealCex { k, x0 } => {
                let _ = cex.insert(Counterexample::Iteration { k, x0: x0.clone() }, spec.init_box());
                confirmed.push((k, x0));
                match refine_spectrum(&confirmed, &phi, &geometry) {
                    Ok(next) => {
                        log.push(record(iteration, Phase::Refine, Some(&ctrl), None, Some(k), format!("rho_max {:.4}", next.rho_max())));
                        phi = next;
                    }
                    Err(_) => {
                        log.push(record(iteration, Phase::Refine, Some(&ctrl), None, Some(k), "infeasible".into()));
                        return fail(Diagnosis::Infeasible, log);
                    }
                }
            }
            AaVerdict::Unproven { k, x0 } => {
                match refine_spectrum(&[(k, x0)], &phi, &geometry) {
                    Ok(next) if next != phi => {
                        log.push(record(iteration, Phase::Refine, Some(&ctrl), None, Some(k), format!("flagged, rho_max {:.4}", next.rho_max())));
                        phi = next;
                    }
                    Ok(_) => {
                        log.push(record(iteration, Phase::Refine, Some(&ctrl), None, Some(k), "no progress".into()));
                        return fail(Diagnosis::RefinementExhausted, log);
                    }
                    Err(_) => {
                        log.push(record(iteration, Phase::Refine, Some(&ctrl), None, Some(k), "infeasible".into()));
                        return fail(Diagnosis::Infeasible, log);
                    }
                }
            }
            AaVerdict::NoCertificate => {
                let rho = crate::stability::spectral_radius(&closed_loop_matrix(plant, &ctrl).expect("dimensions checked"));
                match phi.clone().with_rho_max((0.95 * rho).min(phi.rho_max())) {
                    Ok(next) if next != phi => {
                        log.push(record(iteration, Phase::Refine, Some(&ctrl), None, None, format!("no certificate, rho_max {:.4}", next.rho_max())));
                        phi = next;
                    }
                    _ => return fail(Diagnosis::RefinementExhausted, log),
                }
            }
        }
    }
}

fn record(
    iteration: usize,
    phase: Phase,
    ctrl: Option<&Controller>,
    cex: Option<&[f64]>,
    step: Option<usize>,
    outcome: String,
) -> RunRecord {
    RunRecord {
        iteration,
        phase,
        precision: None,
        candidate: ctrl.map(Controller::to_f64),
        counterexample: cex.map(<[f64]>::to_vec),
        step,
        outcome,
    }
}
