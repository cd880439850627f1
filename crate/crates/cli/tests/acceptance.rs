//! Acceptance run. One PASS/FAIL line per criterion; every tolerance and
//! runtime limit is a named constant below. Exits nonzero if any criterion
//! fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safeloop::exact::{rat, Rational};
use safeloop::fixedpoint::{
    dot_fixed, fp_add, fp_add_error_bound, fp_mul, fp_mul_error_bound, quantize, FixedFormat, FixedValue,
};
use safeloop::interval::HyperBox;
use safeloop::model::{closed_loop_exact, closed_loop_matrix, Controller, DiscretePlant, SafetySpec};
use safeloop::noise::{build_noise_model, controller_error_bound, controller_output, NoiseRouting};
use safeloop::stability::{jury_check, spectral_radius, CharPoly};
use safeloop::verify_aa::{reach_tube, CONDITIONINGS};
use safeloop::verify_msv::{completeness_bound, CONTRACTION_CAP};
use safeloop_cli::harness::{self, Backend, RunOptions};
use safeloop_cli::instance::load_instance;

const SEED: u64 = 0x5afe_100f;

const C1_LIMIT: Duration = Duration::from_secs(10);
const C1_K_REJECT: &str = "0.24609375,-0.125,0.1484375";
const C1_K_ACCEPT: &str = "0.23828125,-0.17578125,0.109375";
const C1_EXPECT_REJECT: &str = "aa: UNSAFE: counterexample at iteration 2 from [0.9, -0.9, 0.9]";
const C1_EXPECT_ACCEPT_PREFIX: &str = "aa: SAFE";

const C2_BUDGET: Duration = Duration::from_secs(120);

const C3_POLYS: usize = 1000;
const C3_MAX_DEGREE: usize = 5;
const C3_COEFF: f64 = 2.0;
const C3_EXCLUSION: f64 = 1e-6;
const C3_LIMIT: Duration = Duration::from_secs(5);

const C4_LIMIT: Duration = Duration::from_secs(30);
/// Operands for add/mul are drawn from this finer grid so both carry a
/// nonzero quantization error.
const C4_OPERAND_FRAC: u32 = 6;
/// Stride through the ⟨4,4⟩ grid for the state side of the n = 2 products.
const C4_STATE_STRIDE: usize = 16;
/// Real states per coordinate for the q3 check, on a 2^-8 grid.
const C4_Q3_STATES: usize = 12;

const C5_LOOPS: usize = 50;
const C5_TRAJECTORIES: usize = 1000;
const C5_STEPS: usize = 100;
const C5_K_STAR: usize = 16;
const C5_ESCAPE_TOL: f64 = 0.0;
const C5_LIMIT: Duration = Duration::from_secs(60);

const C6_LOOPS: usize = 200;
const C6_FACTOR: usize = 10;
const C6_LIMIT: Duration = Duration::from_secs(60);

const C7_MAX_DIM: usize = 3;
const C7_MAX_K: usize = 10;
const C7_COMBINATIONS: usize = 20;
const C7_LOOPS_PER_DIM: usize = 5;

const C8_MIN_INSTANCES: usize = 8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn pass_if(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn benchmarks_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../benchmarks")
}

fn worked_example() -> PathBuf {
    benchmarks_dir().join("worked_example.json")
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

fn run_verify(gains: &str) -> (String, Option<i32>, Duration) {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_safeloop"))
        .args(["verify", "--backend", "aa", &format!("--gains={gains}")])
        .arg(worked_example())
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&out.stdout).trim().to_string();
    (stdout, out.status.code(), start.elapsed())
}

fn criterion_1() -> Outcome {
    let (rej, rej_code, rej_t) = run_verify(C1_K_REJECT);
    let (acc, acc_code, acc_t) = run_verify(C1_K_ACCEPT);
    let ok = rej == C1_EXPECT_REJECT
        && rej_code == Some(1)
        && acc.starts_with(C1_EXPECT_ACCEPT_PREFIX)
        && acc_code == Some(0)
        && rej_t < C1_LIMIT
        && acc_t < C1_LIMIT;
    pass_if(
        ok,
        format!(
            "reject K: {rej:?} exit {rej_code:?} in {}; accept K: {acc:?} exit {acc_code:?} in {}; expected {C1_EXPECT_REJECT:?} and {C1_EXPECT_ACCEPT_PREFIX:?}",
            secs(rej_t),
            secs(acc_t)
        ),
    )
}

fn criterion_2() -> Outcome {
    let inst = load_instance(&worked_example()).expect("worked example loads");
    let opts = RunOptions { time_budget: C2_BUDGET, ..RunOptions::default() };
    let report = harness::run(&inst, &opts);
    let mut ok = true;
    let mut parts = Vec::new();
    for backend in [Backend::Msv, Backend::Aa] {
        let good = report.rows.iter().find(|r| {
            r.backend == backend
                && r.succeeded()
                && r.oracle.as_ref().is_some_and(|o| o.violations == 0)
                && r.wall_time_s <= C2_BUDGET.as_secs_f64()
        });
        match good {
            Some(r) => parts.push(format!("{backend}: K {:?} in {:.2} s", r.controller.as_deref().unwrap_or(&[]), r.wall_time_s)),
            None => {
                ok = false;
                let why: Vec<String> = report
                    .rows
                    .iter()
                    .filter(|r| r.backend == backend)
                    .map(|r| r.diagnosis.clone().unwrap_or_else(|| "no diagnosis".into()))
                    .collect();
                parts.push(format!("{backend}: no controller ({})", why.join("; ")));
            }
        }
    }
    pass_if(ok, parts.join(", "))
}

fn companion(tail: &[f64]) -> DMatrix<f64> {
    let n = tail.len();
    DMatrix::from_fn(n, n, |i, j| if i == 0 { -tail[j] } else if i == j + 1 { 1.0 } else { 0.0 })
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut tested, mut excluded, mut disagreements) = (0, 0, 0);
    while tested < C3_POLYS {
        let degree = rng.gen_range(1..=C3_MAX_DEGREE);
        let tail: Vec<f64> = (0..degree).map(|_| rng.gen_range(-C3_COEFF..=C3_COEFF)).collect();
        let moduli: Vec<f64> = companion(&tail).complex_eigenvalues().iter().map(|z| z.norm()).collect();
        if moduli.iter().any(|m| (m - 1.0).abs() < C3_EXCLUSION) {
            excluded += 1;
            continue;
        }
        let oracle = moduli.iter().all(|&m| m < 1.0);
        if jury_check(&CharPoly::from_f64(&tail)) != oracle {
            disagreements += 1;
        }
        tested += 1;
    }
    let t = start.elapsed();
    pass_if(
        disagreements == 0 && t < C3_LIMIT,
        format!("{tested} polynomials, {excluded} excluded near |z| = 1, {disagreements} disagreements, {} (limit {})", secs(t), secs(C3_LIMIT)),
    )
}

/// Every value in the fixed-point checks is compared as an integer multiple
/// of 2^-24; products go through i128.
const FINE: u32 = 24;

fn to_fine(x: f64) -> i64 {
    let v = x * (FINE as f64).exp2();
    assert!(v.fract() == 0.0 && v.abs() < 2f64.powi(60), "{x} is not on the 2^-{FINE} grid");
    v as i64
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let f = FixedFormat::new(4, 4).unwrap();
    let m = f.max_raw();
    let grid: Vec<FixedValue> = (-m..=m).map(|r| FixedValue::from_raw(r, f).unwrap()).collect();
    let mut checks: u64 = 0;
    let mut violations: u64 = 0;
    let mut overflows: u64 = 0;

    // quantize: every representable real of the operand grid.
    let scale = (C4_OPERAND_FRAC as f64).exp2();
    let op_max = (f.max_value() * scale) as i64;
    let operands: Vec<f64> = (-op_max..=op_max).map(|r| r as f64 / scale).collect();
    let cm_fine = to_fine(f.resolution());
    let mut quantized = Vec::with_capacity(operands.len());
    for &x in &operands {
        let (q, d) = quantize(x, f).expect("operand in range");
        let err = to_fine(x) - to_fine(q.to_f64());
        checks += 1;
        if err.abs() >= cm_fine || to_fine(d) != err || (err != 0 && err.signum() != to_fine(x).signum()) {
            violations += 1;
        }
        quantized.push((q, d));
    }
    for x in [f.max_value() + f.resolution(), -f.max_value() - f.resolution()] {
        checks += 1;
        if quantize(x, f).is_ok() {
            violations += 1;
        }
    }

    // fp_add and fp_mul over all operand pairs.
    for (i, &c1) in operands.iter().enumerate() {
        let (q1, d1) = quantized[i];
        for (j, &c2) in operands.iter().enumerate() {
            let (q2, d2) = quantized[j];
            match fp_add(q1, q2) {
                Ok(s) => {
                    checks += 1;
                    let err = (to_fine(c1) + to_fine(c2) - to_fine(s.to_f64())).abs();
                    if err > to_fine(fp_add_error_bound(d1, d2)) {
                        violations += 1;
                    }
                }
                Err(_) => overflows += 1,
            }
            match fp_mul(q1, q2) {
                Ok(p) => {
                    checks += 1;
                    // c1 c2 has 12 fraction bits; compare at 2^-24 in i128.
                    let exact = to_fine(c1) as i128 * to_fine(c2) as i128;
                    let err = (exact - ((to_fine(p.to_f64()) as i128) << FINE)).abs();
                    let bound = (to_fine(fp_mul_error_bound(q1, q2, d1, d2)) as i128) << FINE;
                    if err > bound {
                        violations += 1;
                    }
                }
                Err(_) => overflows += 1,
            }
        }
    }

    // n = 2 dot product: all gain pairs against a strided grid of states.
    let states: Vec<FixedValue> = grid.iter().step_by(C4_STATE_STRIDE).copied().collect();
    for &k1 in &grid {
        for &k2 in &grid {
            let gains = [k1, k2];
            for &x1 in &states {
                for &x2 in &states {
                    match dot_fixed(&gains, &[x1, x2]) {
                        Ok((u, bound)) => {
                            checks += 1;
                            let exact = k1.raw() * x1.raw() + k2.raw() * x2.raw();
                            // raw products carry 8 fraction bits, u carries 4.
                            let err = (exact - (u.raw() << 4)).abs() as f64 / 256.0;
                            if err > bound {
                                violations += 1;
                            }
                        }
                        Err(_) => overflows += 1,
                    }
                }
            }
        }
    }

    // q3 through the controller path with real, non-representable states.
    let q3_states: Vec<f64> = (0..C4_Q3_STATES)
        .map(|i| {
            let r = -(m * 16 - 3) + (i as i64) * (2 * (m * 16 - 3) / (C4_Q3_STATES as i64 - 1));
            r as f64 / 256.0
        })
        .collect();
    for &k1 in &grid {
        for &k2 in &grid {
            let ctrl = Controller::new(vec![k1, k2], f).unwrap();
            let q3 = controller_error_bound(&ctrl);
            for &x1 in &q3_states {
                for &x2 in &q3_states {
                    match controller_output(&ctrl, &[x1, x2]) {
                        Ok((u, _)) => {
                            checks += 1;
                            // -K x has 12 fraction bits; compare at 2^-24 in i128.
                            let exact = -(to_fine(k1.to_f64()) as i128 * to_fine(x1) as i128
                                + to_fine(k2.to_f64()) as i128 * to_fine(x2) as i128);
                            let err = (exact - ((to_fine(u.to_f64()) as i128) << FINE)).abs();
                            if err > (to_fine(q3) as i128) << FINE {
                                violations += 1;
                            }
                        }
                        Err(_) => overflows += 1,
                    }
                }
            }
        }
    }

    let t = start.elapsed();
    pass_if(
        violations == 0 && t < C4_LIMIT,
        format!(
            "{checks} checks at <4,4>, {violations} violations, {overflows} overflowing cases skipped, {} (limit {})",
            secs(t),
            secs(C4_LIMIT)
        ),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..=1.0))
}

/// Random `A` rescaled to a spectral radius drawn from `rho`.
fn random_stable(rng: &mut ChaCha8Rng, n: usize, rho: std::ops::Range<f64>) -> DMatrix<f64> {
    loop {
        let a = random_matrix(rng, n, n);
        let r = spectral_radius(&a);
        if r > 1e-3 {
            return a * (rng.gen_range(rho.clone()) / r);
        }
    }
}

fn sample_box(rng: &mut ChaCha8Rng, b: &HyperBox) -> Vec<f64> {
    b.coords().iter().map(|c| if c.width() > 0.0 { rng.gen_range(c.lo()..=c.hi()) } else { c.lo() }).collect()
}

fn escape(b: &HyperBox, x: &[f64]) -> f64 {
    b.coords().iter().zip(x).map(|(c, &v)| (c.lo() - v).max(v - c.hi()).max(0.0)).fold(0.0, f64::max)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let fmt = FixedFormat::new(8, 8).unwrap();
    let (mut points, mut escapes, mut loops, mut no_tube) = (0u64, 0u64, 0, 0);
    while loops < C5_LOOPS {
        let n = rng.gen_range(2..=3);
        let plant = DiscretePlant::new(random_stable(&mut rng, n, 0.3..0.85), random_matrix(&mut rng, n, 1), 1.0).unwrap();
        let raw: Vec<i64> = (0..n).map(|_| rng.gen_range(-32..=32)).collect();
        let ctrl = Controller::from_raw(&raw, fmt).unwrap();
        let a_cl = closed_loop_matrix(&plant, &ctrl).unwrap();
        if spectral_radius(&a_cl) >= 0.9 {
            continue;
        }
        let spec = SafetySpec::symmetric(n, 1e3, 1e6, 1.0).unwrap();
        let noise = build_noise_model(fmt, fmt, &ctrl);
        let routing = NoiseRouting::AllStates;
        let Some(tube) = CONDITIONINGS
            .iter()
            .find_map(|&c| reach_tube(&plant, &ctrl, &spec, &noise, routing, C5_K_STAR, c).ok())
        else {
            no_tube += 1;
            continue;
        };
        loops += 1;
        let w = routing.state_noise(&plant, &noise);
        let vertices = spec.init_box().vertices();
        for t in 0..C5_TRAJECTORIES {
            let mut x = if t < vertices.len() { vertices[t].clone() } else { sample_box(&mut rng, spec.init_box()) };
            for k in 0..C5_STEPS {
                points += 1;
                if escape(tube.at(k), &x) > C5_ESCAPE_TOL {
                    escapes += 1;
                }
                let noise = sample_box(&mut rng, &w);
                let next = &a_cl * DMatrix::from_column_slice(n, 1, &x);
                x = (0..n).map(|i| next[i] + noise[i]).collect();
            }
        }
    }
    let t = start.elapsed();
    pass_if(
        escapes == 0 && t < C5_LIMIT,
        format!(
            "{loops} loops, {points} points ({} per loop, K* {C5_K_STAR}), {escapes} escapes (tolerance {C5_ESCAPE_TOL}), {no_tube} loops without a tube resampled, {} (limit {})",
            points / loops.max(1) as u64,
            secs(t),
            secs(C5_LIMIT)
        ),
    )
}

/// First step in `0..=horizon` at which a trajectory from `x0` leaves `safe`.
fn first_violation(a: &DMatrix<f64>, safe: &SafetySpec, x0: &[f64], horizon: usize) -> Option<usize> {
    let mut x = nalgebra::DVector::from_column_slice(x0);
    for k in 0..=horizon {
        if !safe.state_ok(x.as_slice()) {
            return Some(k);
        }
        x = a * x;
    }
    None
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 6);
    let fmt = FixedFormat::new(8, 8).unwrap();
    let (mut loops, mut unsafe_early, mut violations, mut max_k_bar) = (0, 0, 0, 0);
    while loops < C6_LOOPS {
        let n = rng.gen_range(2..=3);
        let plant = DiscretePlant::new(random_stable(&mut rng, n, 0.5..0.98), random_matrix(&mut rng, n, 1), 1.0).unwrap();
        let ctrl = Controller::zero(n, fmt);
        let spec = SafetySpec::symmetric(n, 1.0, 1.0, rng.gen_range(0.2..0.9)).unwrap();
        let Ok(k_bar) = completeness_bound(&plant, &ctrl, &spec) else { continue };
        if k_bar > CONTRACTION_CAP {
            continue;
        }
        let a = plant.a().clone();
        let vertices = spec.init_box().vertices();
        if vertices.iter().any(|v| first_violation(&a, &spec, v, k_bar).is_some()) {
            unsafe_early += 1;
            continue;
        }
        loops += 1;
        max_k_bar = max_k_bar.max(k_bar);
        violations += vertices.iter().filter(|v| first_violation(&a, &spec, v, C6_FACTOR * k_bar).is_some()).count();
    }
    let t = start.elapsed();
    pass_if(
        violations == 0 && t < C6_LIMIT,
        format!(
            "{loops} loops safe up to k_bar (max k_bar {max_k_bar}), {unsafe_early} unsafe loops resampled, {violations} violations up to {C6_FACTOR} k_bar, {} (limit {})",
            secs(t),
            secs(C6_LIMIT)
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 7);
    let fmt = FixedFormat::new(8, 8).unwrap();
    let dyadic = |rng: &mut ChaCha8Rng| rng.gen_range(-256..=256) as f64 / 256.0;
    let (mut comparisons, mut mismatches) = (0, 0);
    for n in 1..=C7_MAX_DIM {
        for _ in 0..C7_LOOPS_PER_DIM {
            let a = DMatrix::from_fn(n, n, |_, _| dyadic(&mut rng));
            let b = DMatrix::from_fn(n, 1, |_, _| dyadic(&mut rng));
            let plant = DiscretePlant::new(a, b, 1.0).unwrap();
            let raw: Vec<i64> = (0..n).map(|_| rng.gen_range(-64..=64)).collect();
            let a_cl = closed_loop_exact(&plant, &Controller::from_raw(&raw, fmt).unwrap()).unwrap();
            let lo: Vec<f64> = (0..n).map(|_| -rng.gen_range(1..=8) as f64 / 8.0).collect();
            let hi: Vec<f64> = (0..n).map(|_| rng.gen_range(1..=8) as f64 / 8.0).collect();
            let vertices: Vec<Vec<Rational>> =
                HyperBox::from_bounds(&lo, &hi).vertices().iter().map(|v| v.iter().map(|&x| rat(x)).collect()).collect();

            let mut vertex_traj = vertices.clone();
            let combos: Vec<Vec<Rational>> = (0..C7_COMBINATIONS)
                .map(|_| {
                    let w: Vec<Rational> = vertices.iter().map(|_| rat(rng.gen_range(0..=1024) as f64)).collect();
                    let total = w.iter().fold(rat(1.0), |acc, x| acc + x);
                    // The extra unit of mass goes to the first vertex so the total is never zero.
                    w.iter().enumerate().map(|(j, x)| if j == 0 { (x + rat(1.0)) / &total } else { x / &total }).collect()
                })
                .collect();
            let combine = |lambda: &[Rational], pts: &[Vec<Rational>]| -> Vec<Rational> {
                (0..n).map(|i| lambda.iter().zip(pts).fold(rat(0.0), |acc, (l, p)| acc + l * &p[i])).collect()
            };
            let mut combo_traj: Vec<Vec<Rational>> = combos.iter().map(|l| combine(l, &vertices)).collect();
            for _ in 1..=C7_MAX_K {
                vertex_traj = vertex_traj.iter().map(|v| a_cl.mul_vec(v)).collect();
                combo_traj = combo_traj.iter().map(|x| a_cl.mul_vec(x)).collect();
                for (lambda, x) in combos.iter().zip(&combo_traj) {
                    comparisons += 1;
                    if combine(lambda, &vertex_traj) != *x {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    pass_if(
        mismatches == 0,
        format!("{comparisons} exact comparisons (n <= {C7_MAX_DIM}, k <= {C7_MAX_K}, {C7_COMBINATIONS} combinations per loop), {mismatches} mismatches"),
    )
}

fn criterion_8() -> Outcome {
    let mut files: Vec<PathBuf> = std::fs::read_dir(benchmarks_dir())
        .expect("benchmarks directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    let (mut instances, mut accepted, mut disagreements) = (0, 0, Vec::new());
    for path in files {
        let inst = load_instance(&path).expect("benchmark loads");
        if !inst.rederived {
            continue;
        }
        instances += 1;
        let report = harness::run(&inst, &RunOptions::default());
        for row in report.rows.iter().filter(|r| r.controller.is_some()) {
            accepted += 1;
            let cross = row.cross_check.as_deref().unwrap_or("missing");
            if !cross.starts_with("SAFE") {
                disagreements.push(format!("{} {} Ts {}: {cross}", row.benchmark, row.backend, row.sample_time));
            }
        }
    }
    pass_if(
        instances >= C8_MIN_INSTANCES && disagreements.is_empty(),
        format!(
            "{instances} re-derived instances (minimum {C8_MIN_INSTANCES}), {accepted} accepted controllers, {} disagreements{}",
            disagreements.len(),
            if disagreements.is_empty() { String::new() } else { format!(": {}", disagreements.join("; ")) }
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("worked-example verify regression", criterion_1),
        ("worked-example synthesis, both back-ends", criterion_2),
        ("Jury agreement with companion roots", criterion_3),
        ("fixed-point error bounds at <4,4>", criterion_4),
        ("reach-tube soundness", criterion_5),
        ("completeness threshold", criterion_6),
        ("vertex reduction, exact rationals", criterion_7),
        ("cross-back-end agreement on benchmarks", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = run();
        failed += usize::from(!outcome.pass);
        println!("{} criterion {}: {name}: {}", if outcome.pass { "PASS" } else { "FAIL" }, i + 1, outcome.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
