use nalgebra::DMatrix;
use num_traits::{Signed, Zero};
use proptest::prelude::*;

use safeloop::exact::{rat, RatMatrix, Rational};
use safeloop::fixedpoint::{dot_fixed, fp_add, fp_mul, quantize, FixedFormat, FixedValue};
use safeloop::interval::{box_step, sqrt_up, HyperBox, Interval, IntervalMatrix, Unfolding};
use safeloop::model::{closed_loop_exact, discretize, Controller, ContinuousPlant, DiscretePlant, SafetySpec};
use safeloop::noise::{LoopSimulator, NoiseModel, NoisePolicy, PlantArithmetic};
use safeloop::stability::{jury_check, jury_check_margin, CharPoly};
use safeloop::verify_msv::{verify_safety, SafetyFailure, SafetyVerdict};

fn fmt(i: u32, f: u32) -> FixedFormat {
    FixedFormat::new(i, f).unwrap()
}

fn square(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| DMatrix::from_row_slice(n, n, &v))
}

fn interval() -> impl Strategy<Value = (Interval, f64)> {
    (-10.0f64..10.0, 0.0f64..5.0, 0.0f64..=1.0).prop_map(|(lo, w, t)| (Interval::new(lo, lo + w), lo + t * w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn discretize_semigroup(a in (2usize..=3).prop_flat_map(square), t in 0.01f64..0.5) {
        let n = a.nrows();
        let plant = ContinuousPlant::new(a, DMatrix::from_element(n, 1, 1.0)).unwrap();
        let tol = 1e-9;
        let one = discretize(&plant, t, tol).unwrap();
        let two = discretize(&plant, 2.0 * t, tol).unwrap();
        let sq = one.a() * one.a();
        for (x, y) in two.a().iter().zip(sq.iter()) {
            prop_assert!((x - y).abs() <= 10.0 * tol, "{x} vs {y}");
        }
    }

    #[test]
    fn closed_loop_is_linear_in_gain(
        a in square(3),
        b in prop::collection::vec(-2.0f64..2.0, 3),
        k1 in prop::collection::vec(-200i64..200, 3),
        k2 in prop::collection::vec(-200i64..200, 3),
    ) {
        let f = fmt(8, 8);
        let plant = DiscretePlant::new(a, DMatrix::from_column_slice(3, 1, &b), 1.0).unwrap();
        let sum: Vec<i64> = k1.iter().zip(&k2).map(|(x, y)| x + y).collect();
        let c1 = Controller::from_raw(&k1, f).unwrap();
        let c2 = Controller::from_raw(&k2, f).unwrap();
        let c12 = Controller::from_raw(&sum, f).unwrap();
        let a_exact = RatMatrix::from_f64(plant.a());
        let lhs = closed_loop_exact(&plant, &c12).unwrap();
        let rhs = closed_loop_exact(&plant, &c1).unwrap()
            .add(&closed_loop_exact(&plant, &c2).unwrap())
            .sub(&a_exact);
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn interval_operations_enclose_points((x, a) in interval(), (y, b) in interval()) {
        prop_assert!(x.add(&y).contains_value(a + b));
        prop_assert!(x.sub(&y).contains_value(a - b));
        prop_assert!(x.mul(&y).contains_value(a * b));
        prop_assert!(x.neg().contains_value(-a));
        if let Some(q) = x.div(&y) {
            prop_assert!(!y.contains_zero());
            prop_assert!(q.contains_value(a / b));
        }
        // Exact rational check of the rounding direction.
        let prod = rat(a) * rat(b);
        let m = x.mul(&y);
        prop_assert!(rat(m.lo()) <= prod && prod <= rat(m.hi()));
        prop_assert!(sqrt_up(a.abs()) >= a.abs().sqrt());
    }

    #[test]
    fn jury_margin_is_monotone(tail in prop::collection::vec(-1.5f64..1.5, 1..=4), r1 in 0.05f64..1.0, dr in 0.0f64..0.5) {
        let p = CharPoly::from_f64(&tail);
        let r2 = (r1 + dr).min(1.0);
        if jury_check_margin(&p, r1).unwrap() {
            prop_assert!(jury_check_margin(&p, r2).unwrap());
        }
        prop_assert_eq!(jury_check_margin(&p, 1.0).unwrap(), jury_check(&p));
    }

    #[test]
    fn quantize_truncates_toward_zero(x in -100.0f64..100.0) {
        let f = fmt(8, 8);
        let (v, delta) = quantize(x, f).unwrap();
        let exact = rat(x);
        let got = v.to_rational();
        if x >= 0.0 {
            prop_assert!(got <= exact);
        } else {
            prop_assert!(got >= exact);
        }
        prop_assert!((exact - &got).abs() < rat(f.resolution()));
        prop_assert_eq!(rat(delta), rat(x) - v.to_rational());
    }

    #[test]
    fn fixed_addition_is_exact(a in -2000i64..2000, b in -2000i64..2000) {
        let f = fmt(8, 8);
        let x = FixedValue::from_raw(a, f).unwrap();
        let y = FixedValue::from_raw(b, f).unwrap();
        let s = fp_add(x, y).unwrap();
        prop_assert_eq!(s.to_rational(), x.to_rational() + y.to_rational());
    }

    #[test]
    fn box_step_encloses_sampled_images(
        a in square(2),
        centre in prop::collection::vec(-1.0f64..1.0, 2),
        t in prop::collection::vec(0.0f64..=1.0, 2),
        nu in prop::collection::vec(-0.1f64..=0.1, 2),
    ) {
        let x = HyperBox::new(centre.iter().map(|&c| Interval::centered(c, 0.5)).collect());
        let pt: Vec<f64> = centre.iter().zip(&t).map(|(c, t)| c - 0.5 + t).collect();
        let m = IntervalMatrix::from_point(&a);
        let out = box_step(&m, &x, &HyperBox::symmetric(0.1, 2));
        let img: Vec<f64> = (0..2).map(|i| a[(i, 0)] * pt[0] + a[(i, 1)] * pt[1] + nu[i]).collect();
        prop_assert!(out.contains_point(&img));
    }
}

/// Randomized soundness of the dot-product bound at ⟨8,8⟩, n ≤ 4.
#[test]
fn dot_product_bound_randomized() {
    use rand::{Rng, SeedableRng};
    let f = fmt(8, 8);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0usize;
    for _ in 0..1_000_000 {
        let n = rng.gen_range(1..=4);
        let k: Vec<FixedValue> = (0..n).map(|_| FixedValue::from_raw(rng.gen_range(-512..=512), f).unwrap()).collect();
        let x: Vec<FixedValue> = (0..n).map(|_| FixedValue::from_raw(rng.gen_range(-512..=512), f).unwrap()).collect();
        let Ok((u, bound)) = dot_fixed(&k, &x) else { continue };
        let exact = k.iter().zip(&x).fold(Rational::zero(), |acc, (a, b)| acc + a.to_rational() * b.to_rational());
        assert!((exact - u.to_rational()).abs() <= rat(bound));
        checked += 1;
    }
    assert!(checked > 900_000);
}

#[test]
fn multiplication_bound_exhaustive_3_5() {
    let f = fmt(3, 5);
    let m = f.max_raw();
    for a in -m..=m {
        for b in -m..=m {
            let x = FixedValue::from_raw(a, f).unwrap();
            let y = FixedValue::from_raw(b, f).unwrap();
            if let Ok(p) = fp_mul(x, y) {
                assert!((x.to_rational() * y.to_rational() - p.to_rational()).abs() < rat(f.resolution()));
            }
        }
    }
}

/// Unfolded boxes contain sampled noisy trajectories of random stable loops.
#[test]
fn unfolding_contains_sampled_trajectories() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = rng.gen_range(2..=3);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.6..0.6));
        let m = IntervalMatrix::from_point(&a);
        let init = HyperBox::symmetric(1.0, n);
        let w = HyperBox::symmetric(0.05, n);
        let mut u = Unfolding::new(&m, &init, &w);
        u.extend(&m, &w, 30);
        for _ in 0..200 {
            let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            for j in 0..=30 {
                assert!(u.state_box(j).contains_point(&x), "escape at step {j}");
                let next: Vec<f64> = (0..n)
                    .map(|i| (0..n).map(|c| a[(i, c)] * x[c]).sum::<f64>() + rng.gen_range(-0.05..=0.05))
                    .collect();
                x = next;
            }
        }
    }
}

/// Every safety counterexample replays to a genuine violation at the
/// reported step.
#[test]
fn safety_counterexamples_replay() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let precision = fmt(17, 7);
    let mut found = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=3);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.2..1.2));
        let b = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
        let plant = DiscretePlant::new(a, b, 0.1).unwrap();
        let gains: Vec<i64> = (0..n).map(|_| rng.gen_range(-128..=128)).collect();
        let ctrl = Controller::from_raw(&gains, fmt(8, 8)).unwrap();
        let spec = SafetySpec::symmetric(n, 1.0, 2.0, 0.8).unwrap();
        if let SafetyVerdict::Counterexample { x0, step, failure } = verify_safety(&plant, &ctrl, &spec, precision, 8) {
            found += 1;
            if failure == SafetyFailure::Overflow {
                continue;
            }
            let sim = LoopSimulator::new(&plant, &ctrl, &spec, PlantArithmetic::Fixed(precision)).unwrap();
            let trace = sim.simulate(&x0, 8, NoisePolicy::Zero, &NoiseModel::zero()).unwrap();
            let v = trace.first_violation(&spec).expect("violation reproduces");
            assert_eq!(v.k, step);
        }
    }
    assert!(found > 10);
}
