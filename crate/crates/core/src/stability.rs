//! Characteristic polynomials, the Jury stability test, eigenvalue
//! estimates, the unfolding completeness threshold and the steady-state
//! offset set of a finite-word-length controller.
//!
//! The Jury test runs in exact rational arithmetic and is the only
//! stability authority. Eigenvalues are floating-point estimates used for
//! thresholds and search heuristics.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use num_traits::{One, Signed, Zero};
use thiserror::Error;

use crate::exact::{rat, to_f64, RatMatrix, Rational};
use crate::interval::{add_up, mul_up, HyperBox, Interval, IntervalError, IntervalMatrix};
use crate::model::{closed_loop_exact, closed_loop_interval, Controller, DiscretePlant, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("closed loop is not asymptotically stable")]
    UnstablePlant,
    #[error("eigenvalues {0} and {1} coincide within 1e-9")]
    RepeatedEigenvalues(Complex64, Complex64),
    #[error("I - A_cl is singular within interval bounds")]
    SingularMatrix,
    #[error("margin must lie in (0, 1], got {0}")]
    BadMargin(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Monic polynomial `z^n + c_1 z^(n-1) + ... + c_n`, coefficients stored
/// leading-first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharPoly {
    coeffs: Vec<Rational>,
}

impl CharPoly {
    /// Leading coefficient is prepended; `tail` holds `c_1..c_n`.
    pub fn monic(tail: Vec<Rational>) -> Self {
        let mut coeffs = Vec::with_capacity(tail.len() + 1);
        coeffs.push(Rational::one());
        coeffs.extend(tail);
        Self { coeffs }
    }

    pub fn from_f64(tail: &[f64]) -> Self {
        Self::monic(tail.iter().map(|&c| rat(c)).collect())
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[Rational] {
        &self.coeffs
    }

    pub fn coeffs_f64(&self) -> Vec<f64> {
        self.coeffs.iter().map(to_f64).collect()
    }

    pub fn eval(&self, z: Complex64) -> Complex64 {
        self.coeffs_f64().iter().fold(Complex64::zero(), |acc, &c| acc * z + c)
    }

    /// `p(rho z) / rho^n`: its roots are the roots of `p` divided by `rho`.
    pub fn scaled(&self, rho: &Rational) -> CharPoly {
        let mut factor = Rational::one();
        let mut coeffs = Vec::with_capacity(self.coeffs.len());
        for c in &self.coeffs {
            coeffs.push(c * &factor);
            factor /= rho;
        }
        CharPoly { coeffs }
    }
}

/// `det(zI - A)` by the Faddeev–LeVerrier recurrence in exact arithmetic.
pub fn char_poly(a: &RatMatrix) -> CharPoly {
    assert!(a.is_square(), "characteristic polynomial of a non-square matrix");
    let n = a.nrows();
    let id = RatMatrix::identity(n);
    let mut tail = Vec::with_capacity(n);
    let mut m = RatMatrix::zeros(n, n);
    let mut c_prev = Rational::one();
    for k in 1..=n {
        m = a.mul(&m).add(&id.scale(&c_prev));
        let c = -a.mul(&m).trace() / Rational::from_integer(k.into());
        tail.push(c.clone());
        c_prev = c;
    }
    CharPoly::monic(tail)
}

pub fn char_poly_f64(a: &DMatrix<f64>) -> CharPoly {
    char_poly(&RatMatrix::from_f64(a))
}

/// True iff every root lies strictly inside the unit circle.
///
/// Runs the Jury/Schur–Cohn reduction: with `a_n` the leading and `a_0` the
/// constant coefficient, `p` is stable iff `|a_0| < |a_n|` and the reduced
/// polynomial `(a_n p(z) - a_0 z^n p(1/z)) / z` is stable. Equality (a root
/// on the circle) counts as unstable.
pub fn jury_check(p: &CharPoly) -> bool {
    let mut c: Vec<Rational> = p.coeffs.clone();
    while c.len() > 1 {
        let n = c.len() - 1;
        let lead = c[0].clone();
        let last = c[n].clone();
        if last.abs() >= lead.abs() {
            return false;
        }
        let mut reduced: Vec<Rational> = (0..n).map(|i| &lead * &c[i] - &last * &c[n - i]).collect();
        // normalize to keep the rationals small
        let head = reduced[0].clone();
        for r in reduced.iter_mut() {
            *r /= &head;
        }
        c = reduced;
    }
    true
}

/// True iff every root lies strictly inside `|z| < rho`.
pub fn jury_check_margin(p: &CharPoly, rho: f64) -> Result<bool, StabilityError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(StabilityError::BadMargin(rho));
    }
    if rho == 1.0 {
        return Ok(jury_check(p));
    }
    Ok(jury_check(&p.scaled(&rat(rho))))
}

/// Roots of a monic polynomial via the eigenvalues of its companion matrix,
/// polished with two Newton steps.
pub fn poly_roots(p: &CharPoly) -> Vec<Complex64> {
    let n = p.degree();
    if n == 0 {
        return Vec::new();
    }
    let c = p.coeffs_f64();
    let companion = DMatrix::from_fn(n, n, |i, j| {
        if i == 0 {
            -c[j + 1]
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    let deriv: Vec<f64> = (0..n).map(|i| c[i] * (n - i) as f64).collect();
    let eval = |coeffs: &[f64], z: Complex64| coeffs.iter().fold(Complex64::zero(), |acc, &k| acc * z + k);
    companion
        .complex_eigenvalues()
        .iter()
        .map(|&z0| {
            let mut z = z0;
            for _ in 0..2 {
                let d = eval(&deriv, z);
                if d.norm() == 0.0 {
                    break;
                }
                let next = z - eval(&c, z) / d;
                if next.is_finite() && eval(&c, next).norm() <= eval(&c, z).norm() {
                    z = next;
                }
            }
            // keep conjugate symmetry exact for real input
            if z.im.abs() <= 1e-12 * z.norm().max(1.0) {
                z.im = 0.0;
            }
            z
        })
        .collect()
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex64> {
    poly_roots(&char_poly_f64(a))
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdBasis {
    /// Some eigenvalue is non-real; the threshold is one full rotation.
    ComplexRotation,
    /// All eigenvalues are real; the distance to the origin shrinks per step.
    RealMonotone,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompletenessThreshold {
    pub k_bar: usize,
    /// Smallest nonzero eigenvalue argument, i.e. the rotation per step in
    /// radians. Zero on the real-monotone branch.
    pub theta: f64,
    pub basis: ThresholdBasis,
}

const REPEATED_TOL: f64 = 1e-9;

/// Number of unfolding steps after which a stable loop with distinct
/// eigenvalues has completed a full rotation in every oscillatory mode.
pub fn completeness_threshold(a_cl: &DMatrix<f64>, sample_time: f64) -> Result<CompletenessThreshold, StabilityError> {
    let _ = sample_time; // the per-step rotation already absorbs T_s
    let p = char_poly_f64(a_cl);
    if !jury_check(&p) {
        return Err(StabilityError::UnstablePlant);
    }
    let roots = poly_roots(&p);
    for (i, a) in roots.iter().enumerate() {
        for b in &roots[i + 1..] {
            if (a - b).norm() < REPEATED_TOL {
                return Err(StabilityError::RepeatedEigenvalues(*a, *b));
            }
        }
    }
    let theta = roots.iter().filter(|z| z.im != 0.0).map(|z| z.arg().abs()).fold(f64::INFINITY, f64::min);
    if theta.is_finite() {
        Ok(CompletenessThreshold {
            k_bar: (2.0 * PI / theta).ceil() as usize,
            theta,
            basis: ThresholdBasis::ComplexRotation,
        })
    } else {
        Ok(CompletenessThreshold { k_bar: 1, theta: 0.0, basis: ThresholdBasis::RealMonotone })
    }
}

/// Symmetric box `±|(I - A_d + B_d K)^-1 B_d K| δ` enclosing the limit set
/// of the loop driven by a per-coordinate state error in `[-δ, δ]`.
pub fn fwl_convergence_set(plant: &DiscretePlant, ctrl: &Controller, delta: f64) -> Result<HyperBox, StabilityError> {
    let exact = closed_loop_exact(plant, ctrl)?;
    if !jury_check(&char_poly(&exact)) {
        return Err(StabilityError::UnstablePlant);
    }
    let n = plant.states();
    let a_cl = closed_loop_interval(plant, ctrl, 0.0)?;
    let m = IntervalMatrix::identity(n).sub(&a_cl);
    let inv = m.inverse().map_err(|e| match e {
        IntervalError::Singular(_) => StabilityError::SingularMatrix,
        IntervalError::DimensionMismatch { .. } => StabilityError::SingularMatrix,
    })?;
    let (_, b) = plant.interval_matrices(0.0);
    let k = IntervalMatrix::from_fn(1, n, |_, j| Interval::point(ctrl.gains()[j].to_f64()));
    let w = inv.mul(&b.mul(&k));
    let delta = delta.abs();
    let radii = (0..n).map(|i| {
        let row_sum = w.row(i).iter().fold(0.0, |acc, x| add_up(acc, x.mag()));
        Interval::symmetric(mul_up(row_sum, delta))
    });
    Ok(HyperBox::new(radii.collect()))
}
