//! Exact rational matrices.
//!
//! Every finite `f64` and every fixed-point value is a dyadic rational, so the
//! plant and controller data can be lifted into `BigRational` without loss.
//! This is the carrier for the characteristic polynomial, the Jury table and
//! the exact-trajectory checks.

use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub type Rational = BigRational;

/// Exact rational value of a finite float.
///
/// # Panics
/// Panics on NaN or infinity.
pub fn rat(x: f64) -> Rational {
    BigRational::from_float(x).unwrap_or_else(|| panic!("non-finite value {x} has no rational form"))
}

/// `2^exp` as a rational, for any sign of `exp`.
pub fn pow2(exp: i32) -> Rational {
    let base = BigInt::from(2u8);
    if exp >= 0 {
        BigRational::from_integer(num_traits::pow(base, exp as usize))
    } else {
        BigRational::new(BigInt::one(), num_traits::pow(base, (-exp) as usize))
    }
}

pub fn to_f64(x: &Rational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RatMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Rational>,
}

impl RatMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Rational::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Rational::one();
        }
        m
    }

    pub fn from_f64(m: &DMatrix<f64>) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[(i, j)] = rat(m[(i, j)]);
            }
        }
        out
    }

    pub fn from_rows(rows: Vec<Vec<Rational>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn mul(&self, rhs: &RatMatrix) -> RatMatrix {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        let mut out = RatMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = &self[(i, k)];
                if a.is_zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    let prod = a * &rhs[(k, j)];
                    out[(i, j)] += prod;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[Rational]) -> Vec<Rational> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| (0..self.cols).fold(Rational::zero(), |acc, j| acc + &self[(i, j)] * &v[j]))
            .collect()
    }

    pub fn add(&self, rhs: &RatMatrix) -> RatMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        RatMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, rhs: &RatMatrix) -> RatMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        RatMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: &Rational) -> RatMatrix {
        RatMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|a| a * s).collect() }
    }

    pub fn trace(&self) -> Rational {
        (0..self.rows.min(self.cols)).fold(Rational::zero(), |acc, i| acc + &self[(i, i)])
    }

    pub fn pow(&self, k: usize) -> RatMatrix {
        assert!(self.is_square());
        let mut out = RatMatrix::identity(self.rows);
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| to_f64(&self[(i, j)]))
    }

    pub fn max_abs(&self) -> Rational {
        self.data.iter().map(|x| x.abs()).max().unwrap_or_else(Rational::zero)
    }
}

impl Index<(usize, usize)> for RatMatrix {
    type Output = Rational;
    fn index(&self, (i, j): (usize, usize)) -> &Rational {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for RatMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Rational {
        &mut self.data[i * self.cols + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_lift_is_exact() {
        assert_eq!(rat(0.1), Rational::new(3602879701896397i64.into(), 36028797018963968u64.into()));
        assert_eq!(rat(-0.25), Rational::new((-1).into(), 4.into()));
        assert_eq!(pow2(-3), Rational::new(1.into(), 8.into()));
        assert_eq!(pow2(4), Rational::from_integer(16.into()));
    }

    #[test]
    fn product_and_trace() {
        let a = RatMatrix::from_f64(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let sq = a.mul(&a);
        assert_eq!(sq.to_f64(), DMatrix::from_row_slice(2, 2, &[7.0, 10.0, 15.0, 22.0]));
        assert_eq!(sq.trace(), rat(29.0));
        assert_eq!(a.pow(2), sq);
        assert_eq!(a.pow(0), RatMatrix::identity(2));
    }
}
