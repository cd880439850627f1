//! Plant models, safety specifications, controllers and zero-order-hold
//! discretization.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::exact::{RatMatrix, Rational};
use crate::fixedpoint::{FixedError, FixedFormat, FixedValue};
use crate::interval::{add_up, HyperBox, Interval, IntervalMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry in {0}")]
    NonFiniteEntry(&'static str),
    #[error("sample time must be positive, got {0}")]
    BadSampleTime(f64),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("discretization overflowed at scaling depth {depth}")]
    NonFinite { depth: u32 },
    #[error("certified radius {radius:e} of entry ({row},{col}) exceeds the requested tolerance")]
    PrecisionNotMet { row: usize, col: usize, radius: f64 },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Fixed(#[from] FixedError),
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<(), ModelError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFiniteEntry(what))
    }
}

/// `dx/dt = A x + B u`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousPlant {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl ContinuousPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, ModelError> {
        validate_pair(&a, &b)?;
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }
}

fn validate_pair(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(), ModelError> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(ModelError::DimensionMismatch(format!("A is {}x{}, expected square and non-empty", n, a.ncols())));
    }
    if b.nrows() != n || b.ncols() == 0 {
        return Err(ModelError::DimensionMismatch(format!("B is {}x{}, expected {}xm with m >= 1", b.nrows(), b.ncols(), n)));
    }
    check_finite(a, "A")?;
    check_finite(b, "B")
}

/// `x[k+1] = A_d x[k] + B_d u[k]`, with a certified per-entry radius around
/// each matrix accounting for discretization error (zero for plants given
/// directly in discrete time).
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePlant {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sample_time: f64,
    a_radius: DMatrix<f64>,
    b_radius: DMatrix<f64>,
}

impl DiscretePlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, sample_time: f64) -> Result<Self, ModelError> {
        validate_pair(&a, &b)?;
        if !(sample_time > 0.0 && sample_time.is_finite()) {
            return Err(ModelError::BadSampleTime(sample_time));
        }
        let (n, m) = (a.nrows(), b.ncols());
        Ok(Self { a, b, sample_time, a_radius: DMatrix::zeros(n, n), b_radius: DMatrix::zeros(n, m) })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    pub fn a_radius(&self) -> &DMatrix<f64> {
        &self.a_radius
    }

    pub fn b_radius(&self) -> &DMatrix<f64> {
        &self.b_radius
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    /// First input column as a vector (all shipped plants are single-input).
    pub fn b_column(&self) -> Vec<f64> {
        self.b.column(0).iter().copied().collect()
    }

    /// `A_d` and `B_d` as interval matrices whose radii add the
    /// discretization certificate and `extra` to each entry.
    /// Same midpoints with every certified radius grown by `extra`, e.g. the
    /// resolution of a fixed-point plant representation.
    pub fn widened(&self, extra: f64) -> Self {
        let widen = |r: &DMatrix<f64>| r.map(|v| add_up(v, extra));
        Self { a_radius: widen(&self.a_radius), b_radius: widen(&self.b_radius), ..self.clone() }
    }

    pub fn interval_matrices(&self, extra: f64) -> (IntervalMatrix, IntervalMatrix) {
        let widen = |r: &DMatrix<f64>| r.map(|v| add_up(v, extra));
        (
            IntervalMatrix::from_mid_rad(&self.a, &widen(&self.a_radius)),
            IntervalMatrix::from_mid_rad(&self.b, &widen(&self.b_radius)),
        )
    }
}

/// Box constraints on states, input and initial states. The reference
/// signal is always zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SafetySpec {
    state: HyperBox,
    input: Interval,
    init: HyperBox,
}

impl SafetySpec {
    /// Requires strict per-coordinate bounds and `init ⊆ state`.
    pub fn new(state: HyperBox, input: Interval, init: HyperBox) -> Result<Self, ModelError> {
        let spec = Self::permissive(state, input, init)?;
        if !crate::interval::contains(&spec.state, &spec.init).unwrap_or(false) {
            return Err(ModelError::InvalidSpec("initial box is not contained in the safe box".into()));
        }
        Ok(spec)
    }

    /// Like [`SafetySpec::new`] but allows an initial box that leaves the
    /// safe box. Such specifications are unsatisfiable at step 0; they exist
    /// for negative tests and diagnostics.
    pub fn permissive(state: HyperBox, input: Interval, init: HyperBox) -> Result<Self, ModelError> {
        if state.dim() == 0 || state.dim() != init.dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "state box has {} coordinates, initial box {}",
                state.dim(),
                init.dim()
            )));
        }
        for (i, c) in state.coords().iter().enumerate() {
            if !(c.lo() < c.hi()) {
                return Err(ModelError::InvalidSpec(format!("state bound {i} is empty: {c}")));
            }
        }
        if !(input.lo() < input.hi()) {
            return Err(ModelError::InvalidSpec(format!("input bounds are empty: {input}")));
        }
        let finite = |b: &HyperBox| b.coords().iter().all(|c| c.lo().is_finite() && c.hi().is_finite());
        if !finite(&state) || !finite(&init) || !input.lo().is_finite() || !input.hi().is_finite() {
            return Err(ModelError::InvalidSpec("bounds must be finite".into()));
        }
        Ok(Self { state, input, init })
    }

    /// Symmetric bounds `±state`, `±input`, `±init` in `n` dimensions.
    pub fn symmetric(n: usize, state: f64, input: f64, init: f64) -> Result<Self, ModelError> {
        Self::new(HyperBox::symmetric(state, n), Interval::symmetric(input), HyperBox::symmetric(init, n))
    }

    pub fn state_box(&self) -> &HyperBox {
        &self.state
    }

    pub fn input_bounds(&self) -> Interval {
        self.input
    }

    pub fn init_box(&self) -> &HyperBox {
        &self.init
    }

    pub fn dim(&self) -> usize {
        self.state.dim()
    }

    pub fn state_ok(&self, x: &[f64]) -> bool {
        self.state.contains_point(x)
    }

    pub fn input_ok(&self, u: f64) -> bool {
        self.input.contains_value(u)
    }

    /// Distance from the origin to the nearest face of the safe box.
    pub fn safe_radius(&self) -> f64 {
        self.state.coords().iter().map(|c| (-c.lo()).min(c.hi())).fold(f64::INFINITY, f64::min)
    }
}

/// Static state feedback `u = -K x` with gains in the controller format.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Controller {
    gains: Vec<FixedValue>,
    format: FixedFormat,
}

impl Controller {
    pub fn new(gains: Vec<FixedValue>, format: FixedFormat) -> Result<Self, ModelError> {
        if gains.is_empty() {
            return Err(ModelError::DimensionMismatch("controller has no gains".into()));
        }
        if let Some(g) = gains.iter().find(|g| g.format() != format) {
            return Err(FixedError::FormatMismatch(g.format(), format).into());
        }
        Ok(Self { gains, format })
    }

    /// Every gain must be exactly representable.
    pub fn from_f64(gains: &[f64], format: FixedFormat) -> Result<Self, ModelError> {
        let gains = gains.iter().map(|&g| FixedValue::exact(g, format)).collect::<Result<Vec<_>, _>>()?;
        Self::new(gains, format)
    }

    pub fn from_raw(raw: &[i64], format: FixedFormat) -> Result<Self, ModelError> {
        let gains = raw.iter().map(|&r| FixedValue::from_raw(r, format)).collect::<Result<Vec<_>, _>>()?;
        Self::new(gains, format)
    }

    pub fn zero(n: usize, format: FixedFormat) -> Self {
        Self { gains: vec![FixedValue::zero(format); n], format }
    }

    pub fn gains(&self) -> &[FixedValue] {
        &self.gains
    }

    pub fn format(&self) -> FixedFormat {
        self.format
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn raw(&self) -> Vec<i64> {
        self.gains.iter().map(FixedValue::raw).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.gains.iter().map(FixedValue::to_f64).collect()
    }

    pub fn sum_abs(&self) -> f64 {
        self.gains.iter().map(|g| g.to_f64().abs()).sum()
    }
}

impl std::fmt::Display for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.gains.iter().map(|g| g.to_f64().to_string()).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

fn check_gain_dims(plant: &DiscretePlant, ctrl: &Controller) -> Result<(), ModelError> {
    if plant.inputs() != 1 || ctrl.len() != plant.states() {
        return Err(ModelError::DimensionMismatch(format!(
            "controller with {} gains for a plant with {} states and {} inputs",
            ctrl.len(),
            plant.states(),
            plant.inputs()
        )));
    }
    Ok(())
}

/// `A_d - B_d K` in floating point.
pub fn closed_loop_matrix(plant: &DiscretePlant, ctrl: &Controller) -> Result<DMatrix<f64>, ModelError> {
    check_gain_dims(plant, ctrl)?;
    let k = DMatrix::from_row_slice(1, ctrl.len(), &ctrl.to_f64());
    Ok(&plant.a - &plant.b * k)
}

/// `A_d - B_d K` in exact rational arithmetic.
pub fn closed_loop_exact(plant: &DiscretePlant, ctrl: &Controller) -> Result<RatMatrix, ModelError> {
    check_gain_dims(plant, ctrl)?;
    let a = RatMatrix::from_f64(&plant.a);
    let b = RatMatrix::from_f64(&plant.b);
    let k = RatMatrix::from_rows(vec![ctrl.gains.iter().map(FixedValue::to_rational).collect::<Vec<Rational>>()]);
    Ok(a.sub(&b.mul(&k)))
}

/// Enclosure of `A_d - B_d K` over the plant's certified radii widened by
/// `extra` per entry.
pub fn closed_loop_interval(plant: &DiscretePlant, ctrl: &Controller, extra: f64) -> Result<IntervalMatrix, ModelError> {
    check_gain_dims(plant, ctrl)?;
    let (a, b) = plant.interval_matrices(extra);
    let k = IntervalMatrix::from_fn(1, ctrl.len(), |_, j| Interval::point(ctrl.gains[j].to_f64()));
    Ok(a.sub(&b.mul(&k)))
}

const TAYLOR_TERMS: usize = 24;
const ABS_FLOOR: f64 = 1e-14;

/// Zero-order-hold discretization via scaling and squaring of the augmented
/// matrix `[[A, B], [0, 0]] * T_s`, evaluated in interval arithmetic with a
/// rigorous Taylor remainder.
///
/// The result's midpoints are the returned `A_d`, `B_d`; the enclosure radii
/// are stored as the plant's certified error radii. Fails if any radius
/// exceeds `tol * |entry| + 1e-14`.
pub fn discretize(plant: &ContinuousPlant, sample_time: f64, tol: f64) -> Result<DiscretePlant, ModelError> {
    if !(sample_time > 0.0 && sample_time.is_finite()) {
        return Err(ModelError::BadSampleTime(sample_time));
    }
    if !(tol > 0.0) {
        return Err(ModelError::BadTolerance(tol));
    }
    let (n, m) = (plant.states(), plant.inputs());
    let size = n + m;
    let ts = Interval::point(sample_time);
    let aug = IntervalMatrix::from_fn(size, size, |i, j| {
        if i >= n {
            Interval::zero()
        } else if j < n {
            Interval::point(plant.a[(i, j)]).mul(&ts)
        } else {
            Interval::point(plant.b[(i, j - n)]).mul(&ts)
        }
    });

    let norm = (0..size)
        .map(|i| aug.row(i).iter().fold(0.0, |acc, x| add_up(acc, x.mag())))
        .fold(0.0, f64::max);
    if !norm.is_finite() {
        return Err(ModelError::NonFinite { depth: 0 });
    }
    let mut depth = 0u32;
    while norm * (-(depth as f64)).exp2() > 0.5 {
        depth += 1;
        if depth > 1000 {
            return Err(ModelError::NonFinite { depth });
        }
    }
    let scale = Interval::point((-(depth as f64)).exp2());
    let x = aug.map(|v| v.mul(&scale));
    let theta = norm * (-(depth as f64)).exp2();

    // Horner form of the truncated series.
    let mut sum = IntervalMatrix::identity(size);
    for k in (1..=TAYLOR_TERMS).rev() {
        let inv_k = Interval::point(1.0).div(&Interval::point(k as f64)).expect("nonzero");
        sum = IntervalMatrix::identity(size).add(&x.mul(&sum).map(|v| v.mul(&inv_k)));
    }
    // Infinity-norm bound of the tail sum_{k > N} X^k / k!.
    let mut factorial = 1.0f64;
    for k in 1..=TAYLOR_TERMS + 1 {
        factorial *= k as f64;
    }
    let tail = theta.powi(TAYLOR_TERMS as i32 + 1) / factorial / (1.0 - theta / (TAYLOR_TERMS as f64 + 2.0));
    let tail = tail * (1.0 + 1e-10) + f64::MIN_POSITIVE;
    let mut exp = sum.map(|v| v.inflate(tail));

    for d in 0..depth {
        exp = exp.mul(&exp);
        if exp.max_width().is_nan() || !exp.mag().iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite { depth: d + 1 });
        }
    }

    let mut a_d = DMatrix::zeros(n, n);
    let mut a_r = DMatrix::zeros(n, n);
    let mut b_d = DMatrix::zeros(n, m);
    let mut b_r = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..size {
            let e = exp.get(i, j);
            let (mid, rad) = (e.mid(), e.rad());
            if rad > tol * mid.abs() + ABS_FLOOR {
                return Err(ModelError::PrecisionNotMet { row: i, col: j, radius: rad });
            }
            if j < n {
                a_d[(i, j)] = mid;
                a_r[(i, j)] = rad;
            } else {
                b_d[(i, j - n)] = mid;
                b_r[(i, j - n)] = rad;
            }
        }
    }
    Ok(DiscretePlant { a: a_d, b: b_d, sample_time, a_radius: a_r, b_radius: b_r })
}
