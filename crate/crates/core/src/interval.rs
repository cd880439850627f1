//! Outward-rounded interval arithmetic over `f64`, interval matrices and
//! axis-aligned boxes.
//!
//! Every operation returns the correctly rounded enclosure: the exact result
//! is computed with an error-free transformation (two-sum, fused
//! multiply-add residual) and the float result is nudged one ulp only when
//! it was inexact in the wrong direction. Exact operations stay exact.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IntervalError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("matrix is singular within interval bounds (pivot {0})")]
    Singular(usize),
}

// Below this magnitude the fma residual may be inexact; round unconditionally.
const TINY: f64 = 1e-290;

fn two_sum_err(a: f64, b: f64, s: f64) -> f64 {
    let bb = s - a;
    (a - (s - bb)) + (b - bb)
}

pub fn add_down(a: f64, b: f64) -> f64 {
    let s = a + b;
    if s.is_infinite() && a.is_finite() && b.is_finite() {
        return if s > 0.0 { f64::MAX } else { s };
    }
    if !s.is_finite() {
        return s;
    }
    if two_sum_err(a, b, s) < 0.0 {
        s.next_down()
    } else {
        s
    }
}

pub fn add_up(a: f64, b: f64) -> f64 {
    -add_down(-a, -b)
}

pub fn sub_down(a: f64, b: f64) -> f64 {
    add_down(a, -b)
}

pub fn sub_up(a: f64, b: f64) -> f64 {
    add_up(a, -b)
}

pub fn mul_down(a: f64, b: f64) -> f64 {
    // interval convention: zero annihilates infinite bounds
    if a == 0.0 || b == 0.0 {
        return 0.0;
    }
    let p = a * b;
    if !p.is_finite() {
        return if p == f64::INFINITY && a.is_finite() && b.is_finite() { f64::MAX } else { p };
    }
    if p.abs() < TINY {
        return p.next_down();
    }
    if a.mul_add(b, -p) < 0.0 {
        p.next_down()
    } else {
        p
    }
}

pub fn mul_up(a: f64, b: f64) -> f64 {
    -mul_down(-a, b)
}

pub fn div_down(a: f64, b: f64) -> f64 {
    let q = a / b;
    if !q.is_finite() {
        return q;
    }
    if q.abs() < TINY {
        return if a == 0.0 { 0.0 } else { q.next_down() };
    }
    // a - q*b is exact; the true quotient is q + r/b.
    let r = (-q).mul_add(b, a);
    if (r < 0.0) != (b < 0.0) && r != 0.0 {
        q.next_down()
    } else {
        q
    }
}

pub fn div_up(a: f64, b: f64) -> f64 {
    -div_down(-a, b)
}

pub fn sqrt_up(x: f64) -> f64 {
    let s = x.sqrt();
    if s.mul_add(s, -x) < 0.0 {
        s.next_up()
    } else {
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    /// # Panics
    /// Panics if `lo > hi` or either endpoint is NaN.
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "ill-formed interval [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Self::new(x, x)
    }

    /// `[-r, r]`.
    pub fn symmetric(r: f64) -> Self {
        Self::new(-r.abs(), r.abs())
    }

    /// `[c - r, c + r]` rounded outward.
    pub fn centered(c: f64, r: f64) -> Self {
        Self::new(sub_down(c, r.abs()), add_up(c, r.abs()))
    }

    pub fn zero() -> Self {
        Self::point(0.0)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn mid(&self) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            0.5 * self.lo + 0.5 * self.hi
        }
    }

    /// Upper bound on the distance from `mid()` to either endpoint.
    pub fn rad(&self) -> f64 {
        let m = self.mid();
        sub_up(self.hi, m).max(sub_up(m, self.lo))
    }

    pub fn width(&self) -> f64 {
        sub_up(self.hi, self.lo)
    }

    /// Magnitude `max |x|` over the interval.
    pub fn mag(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn contains_value(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains(&self, inner: &Interval) -> bool {
        self.lo <= inner.lo && inner.hi <= self.hi
    }

    pub fn contains_zero(&self) -> bool {
        self.contains_value(0.0)
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval::new(self.lo.min(other.lo), self.hi.max(other.hi))
    }

    pub fn is_point(&self) -> bool {
        self.lo == self.hi
    }

    pub fn neg(&self) -> Interval {
        Interval::new(-self.hi, -self.lo)
    }

    pub fn add(&self, rhs: &Interval) -> Interval {
        Interval::new(add_down(self.lo, rhs.lo), add_up(self.hi, rhs.hi))
    }

    pub fn sub(&self, rhs: &Interval) -> Interval {
        Interval::new(sub_down(self.lo, rhs.hi), sub_up(self.hi, rhs.lo))
    }

    pub fn mul(&self, rhs: &Interval) -> Interval {
        let pairs = [(self.lo, rhs.lo), (self.lo, rhs.hi), (self.hi, rhs.lo), (self.hi, rhs.hi)];
        let lo = pairs.iter().map(|&(a, b)| mul_down(a, b)).fold(f64::INFINITY, f64::min);
        let hi = pairs.iter().map(|&(a, b)| mul_up(a, b)).fold(f64::NEG_INFINITY, f64::max);
        Interval::new(lo, hi)
    }

    pub fn scale(&self, s: f64) -> Interval {
        self.mul(&Interval::point(s))
    }

    /// `None` when the divisor contains zero.
    pub fn div(&self, rhs: &Interval) -> Option<Interval> {
        if rhs.contains_zero() {
            return None;
        }
        let pairs = [(self.lo, rhs.lo), (self.lo, rhs.hi), (self.hi, rhs.lo), (self.hi, rhs.hi)];
        let lo = pairs.iter().map(|&(a, b)| div_down(a, b)).fold(f64::INFINITY, f64::min);
        let hi = pairs.iter().map(|&(a, b)| div_up(a, b)).fold(f64::NEG_INFINITY, f64::max);
        Some(Interval::new(lo, hi))
    }

    /// Widens by `r` on both sides.
    pub fn inflate(&self, r: f64) -> Interval {
        Interval::new(sub_down(self.lo, r.abs()), add_up(self.hi, r.abs()))
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

/// Axis-aligned box, one interval per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperBox(Vec<Interval>);

impl HyperBox {
    pub fn new(coords: Vec<Interval>) -> Self {
        Self(coords)
    }

    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self(lo.iter().zip(hi).map(|(&l, &h)| Interval::new(l, h)).collect())
    }

    pub fn symmetric(radius: f64, n: usize) -> Self {
        Self(vec![Interval::symmetric(radius); n])
    }

    pub fn point(x: &[f64]) -> Self {
        Self(x.iter().map(|&v| Interval::point(v)).collect())
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![Interval::zero(); n])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[Interval] {
        &self.0
    }

    pub fn lo(&self) -> Vec<f64> {
        self.0.iter().map(Interval::lo).collect()
    }

    pub fn hi(&self) -> Vec<f64> {
        self.0.iter().map(Interval::hi).collect()
    }

    /// Largest coordinate magnitude (infinity-norm radius about the origin).
    pub fn mag(&self) -> f64 {
        self.0.iter().map(Interval::mag).fold(0.0, f64::max)
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && self.0.iter().zip(x).all(|(i, &v)| i.contains_value(v))
    }

    pub fn add(&self, rhs: &HyperBox) -> HyperBox {
        assert_eq!(self.dim(), rhs.dim());
        HyperBox(self.0.iter().zip(&rhs.0).map(|(a, b)| a.add(b)).collect())
    }

    pub fn hull(&self, rhs: &HyperBox) -> HyperBox {
        assert_eq!(self.dim(), rhs.dim());
        HyperBox(self.0.iter().zip(&rhs.0).map(|(a, b)| a.hull(b)).collect())
    }

    /// Corner points in lexicographic sign order: the first coordinate is the
    /// most significant, lower bound before upper bound.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|c| {
                (0..n)
                    .map(|i| if c >> (n - 1 - i) & 1 == 1 { self.0[i].hi } else { self.0[i].lo })
                    .collect()
            })
            .collect()
    }
}

impl std::ops::Index<usize> for HyperBox {
    type Output = Interval;
    fn index(&self, i: usize) -> &Interval {
        &self.0[i]
    }
}

/// Per-coordinate inclusion `inner ⊆ outer`.
pub fn contains(outer: &HyperBox, inner: &HyperBox) -> Result<bool, IntervalError> {
    if outer.dim() != inner.dim() {
        return Err(IntervalError::DimensionMismatch { expected: outer.dim(), actual: inner.dim() });
    }
    Ok(outer.0.iter().zip(&inner.0).all(|(o, i)| o.contains(i)))
}

pub fn vertices(b: &HyperBox) -> Vec<Vec<f64>> {
    b.vertices()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Interval>,
}

impl IntervalMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Interval) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| Interval::zero())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| Interval::point(if i == j { 1.0 } else { 0.0 }))
    }

    pub fn from_point(m: &nalgebra::DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| Interval::point(m[(i, j)]))
    }

    /// Entrywise `mid ± radius`.
    pub fn from_mid_rad(mid: &nalgebra::DMatrix<f64>, rad: &nalgebra::DMatrix<f64>) -> Self {
        assert_eq!(mid.shape(), rad.shape());
        Self::from_fn(mid.nrows(), mid.ncols(), |i, j| Interval::centered(mid[(i, j)], rad[(i, j)]))
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> Interval {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Interval) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[Interval] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn mid(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).mid())
    }

    /// Entrywise upper bound of `|a_ij|`.
    pub fn mag(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).mag())
    }

    pub fn max_width(&self) -> f64 {
        self.data.iter().map(Interval::width).fold(0.0, f64::max)
    }

    pub fn transposed(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(&Interval) -> Interval) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a.add(b)).collect() }
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a.sub(b)).collect() }
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        Self::from_fn(self.rows, rhs.cols, |i, j| {
            (0..self.cols).fold(Interval::zero(), |acc, k| acc.add(&self.get(i, k).mul(&rhs.get(k, j))))
        })
    }

    pub fn mul_box(&self, x: &HyperBox) -> HyperBox {
        assert_eq!(self.cols, x.dim());
        HyperBox(
            (0..self.rows)
                .map(|i| self.row(i).iter().zip(&x.0).fold(Interval::zero(), |acc, (a, b)| acc.add(&a.mul(b))))
                .collect(),
        )
    }

    /// Interval Gaussian elimination with partial pivoting on magnitudes.
    /// Returns an enclosure of the inverse of every point matrix inside.
    pub fn inverse(&self) -> Result<IntervalMatrix, IntervalError> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = IntervalMatrix::identity(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&p, &q| {
                    let mig = |i: Interval| if i.contains_zero() { 0.0 } else { i.lo().abs().min(i.hi().abs()) };
                    mig(a.get(p, col)).total_cmp(&mig(a.get(q, col)))
                })
                .unwrap();
            if a.get(pivot, col).contains_zero() {
                return Err(IntervalError::Singular(col));
            }
            if pivot != col {
                for j in 0..n {
                    let (x, y) = (a.get(col, j), a.get(pivot, j));
                    a.set(col, j, y);
                    a.set(pivot, j, x);
                    let (x, y) = (inv.get(col, j), inv.get(pivot, j));
                    inv.set(col, j, y);
                    inv.set(pivot, j, x);
                }
            }
            let p = a.get(col, col);
            for j in 0..n {
                a.set(col, j, a.get(col, j).div(&p).ok_or(IntervalError::Singular(col))?);
                inv.set(col, j, inv.get(col, j).div(&p).ok_or(IntervalError::Singular(col))?);
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a.get(r, col);
                if factor == Interval::zero() {
                    continue;
                }
                for j in 0..n {
                    a.set(r, j, a.get(r, j).sub(&factor.mul(&a.get(col, j))));
                    inv.set(r, j, inv.get(r, j).sub(&factor.mul(&inv.get(col, j))));
                }
            }
        }
        Ok(inv)
    }
}

/// One step of interval dynamics: an enclosure of
/// `{ A x + v : A ∈ a_cl, x ∈ x, v ∈ noise }`.
pub fn box_step(a_cl: &IntervalMatrix, x: &HyperBox, noise: &HyperBox) -> HyperBox {
    assert_eq!(a_cl.nrows(), noise.dim());
    a_cl.mul_box(x).add(noise)
}

/// Closed-form unfolding of `x_{j+1} = A x_j + w_j`:
/// `x_j ∈ P_j X0 + S_j` with `P_j ⊇ A^j` and `S_j ⊇ Σ_{i<j} A^i W`.
/// Tighter than iterating [`box_step`] because `X0` is only wrapped once.
#[derive(Clone, Debug)]
pub struct Unfolding {
    init: HyperBox,
    powers: Vec<IntervalMatrix>,
    /// `A^(2^i)` by repeated squaring.
    squares: Vec<IntervalMatrix>,
    sums: Vec<HyperBox>,
}

impl Unfolding {
    pub fn new(a: &IntervalMatrix, init: &HyperBox, w: &HyperBox) -> Self {
        let n = init.dim();
        assert_eq!((a.nrows(), a.ncols(), w.dim()), (n, n, n));
        Self {
            init: init.clone(),
            powers: vec![IntervalMatrix::identity(n)],
            squares: vec![a.clone()],
            sums: vec![HyperBox::zeros(n)],
        }
    }

    /// Extends the unfolding so that steps `0..=steps` are available.
    ///
    /// `P_k = A^(2^t) P_(k - 2^t)` with `2^t` the lowest set bit of `k`, so
    /// each power is a product of at most `log2 k` squares. Stepping by `A`
    /// alone widens like `ρ(|A|)^k`, which diverges for oscillatory loops.
    pub fn extend(&mut self, a: &IntervalMatrix, w: &HyperBox, steps: usize) {
        while self.powers.len() <= steps {
            let k = self.powers.len();
            let last = k - 1;
            let t = k.trailing_zeros() as usize;
            while self.squares.len() <= t {
                let top = self.squares.last().expect("seeded with A");
                self.squares.push(top.mul(top));
            }
            debug_assert!(t > 0 || self.squares[0] == *a);
            let next_sum = self.sums[last].add(&self.powers[last].mul_box(w));
            let next_pow = self.squares[t].mul(&self.powers[k - (1 << t)]);
            self.powers.push(next_pow);
            self.sums.push(next_sum);
        }
    }

    pub fn steps(&self) -> usize {
        self.powers.len() - 1
    }

    pub fn power(&self, j: usize) -> &IntervalMatrix {
        &self.powers[j]
    }

    pub fn noise_sum(&self, j: usize) -> &HyperBox {
        &self.sums[j]
    }

    pub fn state_box(&self, j: usize) -> HyperBox {
        self.powers[j].mul_box(&self.init).add(&self.sums[j])
    }

    /// Enclosure of `c · x_j` for a row vector `c`, formed as `(c P_j) X0 + c S_j`.
    pub fn linear_image(&self, c: &[Interval], j: usize) -> Interval {
        let n = self.init.dim();
        assert_eq!(c.len(), n);
        let p = &self.powers[j];
        let mut acc = Interval::zero();
        for col in 0..n {
            let coef = (0..n).fold(Interval::zero(), |s, r| s.add(&c[r].mul(&p.get(r, col))));
            acc = acc.add(&coef.mul(&self.init[col]));
        }
        c.iter().zip(self.sums[j].coords()).fold(acc, |s, (ci, si)| s.add(&ci.mul(si)))
    }
}
