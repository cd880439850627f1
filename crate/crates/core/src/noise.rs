//! Quantization noise model and the noisy closed-loop simulator.
//!
//! The controller reads the state through an ADC with the controller's
//! resolution, computes `u = -K x` in fixed point, and drives the plant
//! through a DAC. The three error sources are bounded by `q1` (ADC), `q2`
//! (DAC) and `q3` (controller arithmetic) and aggregated into the symmetric
//! set `N = [-(q1/2 + q2/2 + q3), q1/2 + q2/2 + q3]` on the input channel.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{dot_fixed, fp_add, fp_mul, quantize, FixedError, FixedFormat, FixedValue};
use crate::interval::{add_up, mul_up, HyperBox, Interval};
use crate::model::{Controller, DiscretePlant, SafetySpec};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("step {step}: {source}")]
pub struct SimError {
    pub step: usize,
    #[source]
    pub source: FixedError,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// ADC quantum `2^-F_c`.
    pub q1: f64,
    /// DAC quantum, zero when the DAC is at least as fine as the controller.
    pub q2: f64,
    /// Worst-case controller round-off `c_m (n + sum |K_i|)`.
    pub q3: f64,
    bound: Interval,
}

impl NoiseModel {
    pub fn new(q1: f64, q2: f64, q3: f64) -> Self {
        assert!(q1 >= 0.0 && q2 >= 0.0 && q3 >= 0.0, "noise quanta must be nonnegative");
        let r = add_up(add_up(0.5 * q1, 0.5 * q2), q3);
        Self { q1, q2, q3, bound: Interval::symmetric(r) }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// The set `N` on the input channel.
    pub fn bound(&self) -> Interval {
        self.bound
    }

    pub fn radius(&self) -> f64 {
        self.bound.hi()
    }
}

/// Worst-case error of `-K F(x)` against `-K x` for a real state `x`:
/// every product contributes `|K_i| c_m` from truncating `x_i` plus `c_m`
/// from truncating the product.
pub fn controller_error_bound(ctrl: &Controller) -> f64 {
    let cm = ctrl.format().resolution();
    let n = ctrl.len() as f64;
    mul_up(cm, add_up(n, ctrl.sum_abs()))
}

pub fn build_noise_model(fmt_c: FixedFormat, fmt_dac: FixedFormat, ctrl: &Controller) -> NoiseModel {
    let q1 = fmt_c.resolution();
    let q2 = if fmt_dac.frac_bits < fmt_c.frac_bits { fmt_dac.resolution() } else { 0.0 };
    NoiseModel::new(q1, q2, controller_error_bound(ctrl))
}

/// Control value computed by the digital controller for a real state:
/// ADC truncation into the controller format, fixed-point dot product,
/// negation. Returns `(u, bound)` with `|u - (-K x)| <= bound`.
pub fn controller_output(ctrl: &Controller, x: &[f64]) -> Result<(FixedValue, f64), FixedError> {
    let fmt = ctrl.format();
    let xq = x.iter().map(|&v| quantize(v, fmt).map(|(q, _)| q)).collect::<Result<Vec<_>, _>>()?;
    let (dot, _) = dot_fixed(ctrl.gains(), &xq)?;
    Ok((dot.neg(), controller_error_bound(ctrl)))
}

/// DAC conversion: rounds to the nearest point of the `2^-F_dac` grid, so
/// the error stays within `q2 / 2`.
pub fn dac_convert(u: f64, fmt_dac: FixedFormat) -> f64 {
    let scale = (fmt_dac.frac_bits as f64).exp2();
    (u * scale).round() / scale
}

/// How the aggregated noise enters the state update in set-based analyses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRouting {
    /// `B_n = [1 ... 1]^T`: the noise is added to every state coordinate.
    #[default]
    AllStates,
    /// Through the plant's input matrix `B_d`.
    InputMatrix,
}

impl NoiseRouting {
    /// Per-step additive noise box in state space.
    pub fn state_noise(&self, plant: &DiscretePlant, noise: &NoiseModel) -> HyperBox {
        let n = plant.states();
        match self {
            NoiseRouting::AllStates => HyperBox::new(vec![noise.bound(); n]),
            NoiseRouting::InputMatrix => {
                let (_, b) = plant.interval_matrices(0.0);
                HyperBox::new((0..n).map(|i| b.get(i, 0).mul(&noise.bound())).collect())
            }
        }
    }
}

/// Carrier for the plant side of a simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlantArithmetic {
    /// Binary64 stand-in for the real-valued plant.
    Real,
    /// Plant matrices, state and input truncated to a fixed-point format.
    Fixed(FixedFormat),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub x_next: Vec<f64>,
    /// Input applied to the plant after saturation.
    pub u: f64,
    /// Controller output plus ADC noise, before saturation.
    pub u_demand: f64,
}

/// A closed loop ready to simulate: plant matrices pre-quantized for the
/// chosen arithmetic.
#[derive(Clone, Debug)]
pub struct LoopSimulator<'a> {
    plant: &'a DiscretePlant,
    ctrl: &'a Controller,
    spec: &'a SafetySpec,
    arith: PlantArithmetic,
    fixed: Option<(Vec<Vec<FixedValue>>, Vec<FixedValue>)>,
}

impl<'a> LoopSimulator<'a> {
    pub fn new(
        plant: &'a DiscretePlant,
        ctrl: &'a Controller,
        spec: &'a SafetySpec,
        arith: PlantArithmetic,
    ) -> Result<Self, FixedError> {
        let n = plant.states();
        if ctrl.len() != n {
            return Err(FixedError::LengthMismatch(ctrl.len(), n));
        }
        let fixed = match arith {
            PlantArithmetic::Real => None,
            PlantArithmetic::Fixed(fmt) => {
                let q = |m: &DMatrix<f64>, i: usize, j: usize| quantize(m[(i, j)], fmt).map(|(v, _)| v);
                let a = (0..n).map(|i| (0..n).map(|j| q(plant.a(), i, j)).collect()).collect::<Result<Vec<Vec<_>>, _>>()?;
                let b = (0..n).map(|i| q(plant.b(), i, 0)).collect::<Result<Vec<_>, _>>()?;
                Some((a, b))
            }
        };
        Ok(Self { plant, ctrl, spec, arith, fixed })
    }

    pub fn arithmetic(&self) -> PlantArithmetic {
        self.arith
    }

    pub fn spec(&self) -> &SafetySpec {
        self.spec
    }

    /// `x' = A_d x + B_d (sat(u + nu1) + nu2)` with `u` from the fixed-point
    /// controller.
    pub fn step(&self, x: &[f64], nu1: f64, nu2: f64) -> Result<StepOutcome, FixedError> {
        let (u_c, _) = controller_output(self.ctrl, x)?;
        let u_demand = u_c.to_f64() + nu1;
        let bounds = self.spec.input_bounds();
        let u = u_demand.clamp(bounds.lo(), bounds.hi());
        let applied = u + nu2;
        let x_next = match (&self.fixed, self.arith) {
            (Some((a, b)), PlantArithmetic::Fixed(fmt)) => {
                let xq = x.iter().map(|&v| quantize(v, fmt).map(|(q, _)| q)).collect::<Result<Vec<_>, _>>()?;
                let uq = quantize(applied, fmt)?.0;
                let mut out = Vec::with_capacity(xq.len());
                for (row, bi) in a.iter().zip(b) {
                    let mut acc = FixedValue::zero(fmt);
                    for (aij, xj) in row.iter().zip(&xq) {
                        acc = fp_add(acc, fp_mul(*aij, *xj)?)?;
                    }
                    acc = fp_add(acc, fp_mul(*bi, uq)?)?;
                    out.push(acc.to_f64());
                }
                out
            }
            _ => {
                let a = self.plant.a();
                let b = self.plant.b();
                (0..x.len())
                    .map(|i| (0..x.len()).map(|j| a[(i, j)] * x[j]).sum::<f64>() + b[(i, 0)] * applied)
                    .collect()
            }
        };
        Ok(StepOutcome { x_next, u, u_demand })
    }

    pub fn simulate(&self, x0: &[f64], steps: usize, policy: NoisePolicy, noise: &NoiseModel) -> Result<Trace, SimError> {
        assert!(steps >= 1, "simulate needs at least one step");
        let mut rng = match policy {
            NoisePolicy::Sampled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        let (h1, h2) = (0.5 * noise.q1, 0.5 * noise.q2);
        let mut entries = Vec::with_capacity(steps + 1);
        let mut x = x0.to_vec();
        for k in 0..steps {
            let wrap = |source| SimError { step: k, source };
            let out = match policy {
                NoisePolicy::Zero => self.step(&x, 0.0, 0.0).map_err(wrap)?,
                NoisePolicy::Sampled(_) => {
                    let rng = rng.as_mut().expect("seeded");
                    let nu1 = if h1 > 0.0 { rng.gen_range(-h1..=h1) } else { 0.0 };
                    let nu2 = if h2 > 0.0 { rng.gen_range(-h2..=h2) } else { 0.0 };
                    self.step(&x, nu1, nu2).map_err(wrap)?
                }
                NoisePolicy::WorstCaseSign => {
                    let plus = self.step(&x, h1, h2).map_err(wrap)?;
                    let minus = self.step(&x, -h1, -h2).map_err(wrap)?;
                    let mag = |o: &StepOutcome| o.x_next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    if mag(&minus) > mag(&plus) {
                        minus
                    } else {
                        plus
                    }
                }
            };
            entries.push(TraceEntry { k, x: x.clone(), u: out.u, u_demand: out.u_demand });
            x = out.x_next;
        }
        let (u_last, _) = controller_output(self.ctrl, &x).map_err(|source| SimError { step: steps, source })?;
        let bounds = self.spec.input_bounds();
        let u_demand = u_last.to_f64();
        entries.push(TraceEntry { k: steps, x, u: u_demand.clamp(bounds.lo(), bounds.hi()), u_demand });
        Ok(Trace { entries })
    }
}

/// One closed-loop step with explicit ADC and DAC noise values.
#[allow(clippy::too_many_arguments)]
pub fn noisy_step(
    plant: &DiscretePlant,
    ctrl: &Controller,
    spec: &SafetySpec,
    arith: PlantArithmetic,
    x: &[f64],
    nu1: f64,
    nu2: f64,
) -> Result<StepOutcome, FixedError> {
    LoopSimulator::new(plant, ctrl, spec, arith)?.step(x, nu1, nu2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoisePolicy {
    Zero,
    /// Per step, the noise sign that maximizes the next state's magnitude.
    WorstCaseSign,
    /// Uniform noise from a seeded generator.
    Sampled(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: f64,
    pub u_demand: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    State(usize),
    Input,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub k: usize,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trace {
    entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_state(&self) -> &[f64] {
        &self.entries.last().expect("non-empty trace").x
    }

    /// Earliest state or input-demand violation. Inputs are checked for
    /// every step that drives a transition, states for every entry.
    pub fn first_violation(&self, spec: &SafetySpec) -> Option<Violation> {
        let last = self.entries.len().saturating_sub(1);
        for (idx, e) in self.entries.iter().enumerate() {
            if let Some(i) = spec.state_box().coords().iter().zip(&e.x).position(|(c, &v)| !c.contains_value(v)) {
                return Some(Violation { k: e.k, kind: ViolationKind::State(i) });
            }
            if idx < last && !spec.input_ok(e.u_demand) {
                return Some(Violation { k: e.k, kind: ViolationKind::Input });
            }
        }
        None
    }

    /// CSV with header `k,x1,..,xn,u`, one row per entry.
    pub fn to_csv(&self) -> String {
        let n = self.entries.first().map_or(0, |e| e.x.len());
        let mut out = String::from("k");
        for i in 1..=n {
            let _ = write!(out, ",x{i}");
        }
        out.push_str(",u\n");
        for e in &self.entries {
            let _ = write!(out, "{}", e.k);
            for v in &e.x {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", e.u);
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    plant: &DiscretePlant,
    ctrl: &Controller,
    spec: &SafetySpec,
    arith: PlantArithmetic,
    x0: &[f64],
    steps: usize,
    policy: NoisePolicy,
    noise: &NoiseModel,
) -> Result<Trace, SimError> {
    let sim = LoopSimulator::new(plant, ctrl, spec, arith).map_err(|source| SimError { step: 0, source })?;
    sim.simulate(x0, steps, policy, noise)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub runs: usize,
    pub steps: usize,
    pub violations: usize,
}

impl OracleVerdict {
    pub fn safe(&self) -> bool {
        self.violations == 0
    }
}

/// Monte-Carlo safety oracle: real-valued plant, fixed-point controller,
/// sampled ADC/DAC noise, every vertex of the initial box and every seed in
/// `seeds`. Overflow counts as a violation.
pub fn sampled_oracle(
    plant: &DiscretePlant,
    ctrl: &Controller,
    spec: &SafetySpec,
    noise: &NoiseModel,
    steps: usize,
    seeds: std::ops::Range<u64>,
) -> OracleVerdict {
    let mut verdict = OracleVerdict { runs: 0, steps, violations: 0 };
    let Ok(sim) = LoopSimulator::new(plant, ctrl, spec, PlantArithmetic::Real) else {
        verdict.violations = 1;
        return verdict;
    };
    for (v, x0) in spec.init_box().vertices().iter().enumerate() {
        for seed in seeds.clone() {
            verdict.runs += 1;
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ v as u64;
            match sim.simulate(x0, steps, NoisePolicy::Sampled(s), noise) {
                Ok(trace) if trace.first_violation(spec).is_none() => {}
                _ => verdict.violations += 1,
            }
        }
    }
    verdict
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmt(i: u32, f: u32) -> FixedFormat {
        FixedFormat::new(i, f).unwrap()
    }

    fn scalar(a: f64, b: f64) -> DiscretePlant {
        DiscretePlant::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b), 1.0).unwrap()
    }

    #[test]
    fn noise_model_examples() {
        let f = fmt(8, 8);
        let zero3 = Controller::zero(3, f);
        let m = build_noise_model(f, f, &zero3);
        assert_eq!(m.q2, 0.0);
        assert_eq!(m.q1, 1.0 / 256.0);
        assert_eq!(m.q3, 3.0 / 256.0);
        assert_eq!(m.radius(), 0.5 / 256.0 + 3.0 / 256.0);

        let coarse_dac = build_noise_model(f, fmt(8, 6), &zero3);
        assert_eq!(coarse_dac.q2, 1.0 / 64.0);
        let fine_dac = build_noise_model(f, fmt(8, 12), &zero3);
        assert_eq!(fine_dac.q2, 0.0);
    }

    #[test]
    fn step_examples() {
        let f = fmt(8, 8);
        let spec = SafetySpec::symmetric(1, 2.0, 10.0, 1.0).unwrap();
        let plant = scalar(0.5, 1.0);
        let k0 = Controller::zero(1, f);
        let out = noisy_step(&plant, &k0, &spec, PlantArithmetic::Real, &[0.0], 0.0, 0.0).unwrap();
        assert_eq!((out.x_next[0], out.u), (0.0, 0.0));
        let out = noisy_step(&plant, &k0, &spec, PlantArithmetic::Real, &[1.0], 0.0, 0.0).unwrap();
        assert_eq!(out.x_next[0], 0.5);
        let out = noisy_step(&plant, &k0, &spec, PlantArithmetic::Fixed(fmt(8, 8)), &[1.0], 0.0, 0.0).unwrap();
        assert_eq!(out.x_next[0], 0.5);
    }

    #[test]
    fn saturation_clamps_input() {
        let f = fmt(8, 8);
        let spec = SafetySpec::symmetric(1, 2.0, 0.5, 1.0).unwrap();
        let plant = scalar(0.5, 1.0);
        let k = Controller::from_f64(&[4.0], f).unwrap();
        let out = noisy_step(&plant, &k, &spec, PlantArithmetic::Real, &[1.0], 0.0, 0.0).unwrap();
        assert_eq!(out.u_demand, -4.0);
        assert_eq!(out.u, -0.5);
        assert_eq!(out.x_next[0], 0.0);
    }

    #[test]
    fn plant_precision_overflow_surfaces() {
        let f = fmt(8, 8);
        let spec = SafetySpec::symmetric(1, 100.0, 10.0, 1.0).unwrap();
        let plant = scalar(3.0, 1.0);
        let k0 = Controller::zero(1, f);
        let err = simulate(&plant, &k0, &spec, PlantArithmetic::Fixed(fmt(4, 4)), &[1.0], 5, NoisePolicy::Zero, &NoiseModel::zero())
            .unwrap_err();
        assert_eq!(err.step, 1);
    }

    #[test]
    fn one_step_trace_matches_noisy_step() {
        let f = fmt(8, 8);
        let spec = SafetySpec::symmetric(1, 2.0, 10.0, 1.0).unwrap();
        let plant = scalar(0.9, 0.5);
        let k = Controller::from_f64(&[0.5], f).unwrap();
        let t = simulate(&plant, &k, &spec, PlantArithmetic::Real, &[0.7], 1, NoisePolicy::Zero, &NoiseModel::zero()).unwrap();
        let s = noisy_step(&plant, &k, &spec, PlantArithmetic::Real, &[0.7], 0.0, 0.0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.entries()[1].x, s.x_next);
        assert_eq!(t.entries()[0].u, s.u);
    }

    #[test]
    fn stable_scalar_decays_monotonically() {
        let f = fmt(8, 8);
        let spec = SafetySpec::symmetric(1, 2.0, 10.0, 1.0).unwrap();
        let plant = scalar(0.9, 1.0);
        let k = Controller::from_f64(&[0.25], f).unwrap();
        let t = simulate(&plant, &k, &spec, PlantArithmetic::Real, &[1.0], 1000, NoisePolicy::Zero, &NoiseModel::zero()).unwrap();
        let mags: Vec<f64> = t.entries().iter().map(|e| e.x[0].abs()).collect();
        assert!(mags.windows(2).all(|w| w[1] <= w[0]));
        assert!(mags[1000] < 1e-6);
    }

    #[test]
    fn zero_gain_decay_matches_closed_form_at_plant_precision() {
        let f = fmt(8, 8);
        let spec = SafetySpec::symmetric(1, 2.0, 10.0, 1.0).unwrap();
        let plant = scalar(0.75, 1.0);
        let k0 = Controller::zero(1, f);
        let pf = fmt(8, 16);
        let t = simulate(&plant, &k0, &spec, PlantArithmetic::Fixed(pf), &[1.0], 30, NoisePolicy::Zero, &NoiseModel::zero()).unwrap();
        for e in t.entries() {
            let exact = 0.75f64.powi(e.k as i32);
            // each step truncates once at 2^-16
            assert!(e.x[0] <= exact && exact - e.x[0] <= e.k as f64 * pf.resolution(), "k={}", e.k);
        }
    }

    #[test]
    fn csv_layout() {
        let f = fmt(8, 8);
        let spec = SafetySpec::symmetric(2, 2.0, 10.0, 1.0).unwrap();
        let plant = DiscretePlant::new(DMatrix::identity(2, 2) * 0.5, DMatrix::from_row_slice(2, 1, &[1.0, 0.0]), 0.1).unwrap();
        let k = Controller::zero(2, f);
        let t = simulate(&plant, &k, &spec, PlantArithmetic::Real, &[1.0, -1.0], 2, NoisePolicy::Zero, &NoiseModel::zero()).unwrap();
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "k,x1,x2,u");
        assert_eq!(lines[1], "0,1,-1,0");
        assert_eq!(lines[2], "1,0.5,-0.5,0");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn sampled_runs_are_reproducible() {
        let f = fmt(8, 8);
        let spec = SafetySpec::symmetric(1, 2.0, 10.0, 1.0).unwrap();
        let plant = scalar(0.9, 1.0);
        let k = Controller::from_f64(&[0.25], f).unwrap();
        let noise = build_noise_model(f, fmt(8, 4), &k);
        let run = |seed| simulate(&plant, &k, &spec, PlantArithmetic::Real, &[1.0], 50, NoisePolicy::Sampled(seed), &noise).unwrap();
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn exhaustive_controller_path_stays_inside_n_at_4_4() {
        let f = fmt(4, 4);
        let dac = fmt(4, 2);
        let m = f.max_raw();
        let mut checked = 0usize;
        let xs: Vec<f64> = (-512..=512).map(|i| i as f64 / 128.0 + 1.0 / 1024.0).collect();
        for r in -m..=m {
            let k = Controller::from_raw(&[r], f).unwrap();
            let noise = build_noise_model(f, dac, &k);
            let kf = k.to_f64()[0];
            for &x in &xs {
                let Ok((u, q3)) = controller_output(&k, &[x]) else { continue };
                checked += 1;
                let exact = -kf * x;
                assert!((u.to_f64() - exact).abs() <= q3, "K={kf} x={x}");
                let out = dac_convert(u.to_f64(), dac);
                assert!((out - exact).abs() <= noise.radius(), "K={kf} x={x}");
            }
        }
        let probes = [[0.53125, -1.96875], [-3.0078125, 2.5], [1.0, 1.0]];
        for r0 in -m..=m {
            for r1 in -m..=m {
                let k = Controller::from_raw(&[r0, r1], f).unwrap();
                let kf = k.to_f64();
                for x in &probes {
                    let Ok((u, q3)) = controller_output(&k, x) else { continue };
                    checked += 1;
                    let exact = -(kf[0] * x[0] + kf[1] * x[1]);
                    assert!((u.to_f64() - exact).abs() <= q3, "K={kf:?} x={x:?}");
                }
            }
        }
        assert!(checked > 200_000, "only {checked} cases evaluated");
    }

    #[test]
    fn oracle_counts_every_vertex_and_seed() {
        let f = fmt(8, 8);
        let k = Controller::zero(1, f);
        let noise = build_noise_model(f, f, &k);
        let spec = SafetySpec::symmetric(1, 1.0, 1.0, 0.5).unwrap();
        let safe = sampled_oracle(&scalar(0.5, 1.0), &k, &spec, &noise, 20, 3..13);
        assert_eq!((safe.runs, safe.violations), (20, 0));
        assert!(safe.safe());
        let unsafe_ = sampled_oracle(&scalar(1.5, 1.0), &k, &spec, &noise, 20, 0..5);
        assert_eq!((unsafe_.runs, unsafe_.violations), (10, 10));
    }
}
