//! Fixed-point numbers `<I,F>` with truncation semantics and the associated
//! worst-case error calculus.
//!
//! A value is stored as a signed integer `raw` with value `raw * 2^-F`. All
//! rounding truncates toward zero at the last fraction bit. Addition of two
//! values in the same format is exact; multiplication forms the double-width
//! product and truncates it once.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{pow2, Rational};

/// Widest format accepted: keeps every raw value exactly representable in an
/// `f64` and every product inside an `i128`.
pub const MAX_TOTAL_BITS: u32 = 52;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FixedError {
    #[error("value {value} overflows format {format} (limit ±{limit})")]
    Overflow { value: f64, format: FixedFormat, limit: f64 },
    #[error("invalid fixed-point format <{int_bits},{frac_bits}>")]
    InvalidFormat { int_bits: u32, frac_bits: u32 },
    #[error("operands have different formats: {0} vs {1}")]
    FormatMismatch(FixedFormat, FixedFormat),
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("divisor truncation error {delta} is not smaller than the divisor {divisor}")]
    DivisorTooSmall { divisor: f64, delta: f64 },
    #[error("{value} is not exactly representable in {format}")]
    NotRepresentable { value: f64, format: FixedFormat },
    #[error("length mismatch: {0} gains, {1} operands")]
    LengthMismatch(usize, usize),
}

/// A `<I,F>` format: `I` integer bits (sign included) and `F` fraction bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedFormat {
    #[serde(rename = "I")]
    pub int_bits: u32,
    #[serde(rename = "F")]
    pub frac_bits: u32,
}

impl FixedFormat {
    pub fn new(int_bits: u32, frac_bits: u32) -> Result<Self, FixedError> {
        if int_bits == 0 || int_bits + frac_bits > MAX_TOTAL_BITS {
            return Err(FixedError::InvalidFormat { int_bits, frac_bits });
        }
        Ok(Self { int_bits, frac_bits })
    }

    pub fn validate(&self) -> Result<(), FixedError> {
        Self::new(self.int_bits, self.frac_bits).map(|_| ())
    }

    /// Resolution `c_m = 2^-F`.
    pub fn resolution(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    fn scale(&self) -> f64 {
        (self.frac_bits as f64).exp2()
    }

    /// Largest raw magnitude: the range is `±(2^(I-1) + 1 - 2^-F)`.
    pub fn max_raw(&self) -> i64 {
        ((1i64 << (self.int_bits - 1)) + 1) * (1i64 << self.frac_bits) - 1
    }

    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 * self.resolution()
    }

    pub fn contains(&self, x: f64) -> bool {
        x.abs() <= self.max_value()
    }

    pub fn total_bits(&self) -> u32 {
        self.int_bits + self.frac_bits
    }
}

impl fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{}>", self.int_bits, self.frac_bits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FixedValue {
    raw: i64,
    format: FixedFormat,
}

impl FixedValue {
    pub fn from_raw(raw: i64, format: FixedFormat) -> Result<Self, FixedError> {
        if raw.abs() > format.max_raw() {
            return Err(FixedError::Overflow {
                value: raw as f64 * format.resolution(),
                format,
                limit: format.max_value(),
            });
        }
        Ok(Self { raw, format })
    }

    pub fn zero(format: FixedFormat) -> Self {
        Self { raw: 0, format }
    }

    /// Exact conversion; fails unless `x` lies on the `2^-F` grid and in range.
    pub fn exact(x: f64, format: FixedFormat) -> Result<Self, FixedError> {
        let (v, delta) = quantize(x, format)?;
        if delta != 0.0 {
            return Err(FixedError::NotRepresentable { value: x, format });
        }
        Ok(v)
    }

    pub fn raw(&self) -> i64 {
        self.raw
    }

    pub fn format(&self) -> FixedFormat {
        self.format
    }

    /// Exact: `|raw| < 2^52` for every accepted format.
    pub fn to_f64(&self) -> f64 {
        self.raw as f64 * self.format.resolution()
    }

    pub fn to_rational(&self) -> Rational {
        Rational::from_integer(self.raw.into()) * pow2(-(self.format.frac_bits as i32))
    }

    pub fn neg(&self) -> Self {
        Self { raw: -self.raw, format: self.format }
    }

    pub fn abs(&self) -> Self {
        Self { raw: self.raw.abs(), format: self.format }
    }

    pub fn is_zero(&self) -> bool {
        self.raw == 0
    }
}

impl fmt::Display for FixedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

/// Truncates `x` toward zero onto the grid of `format`.
///
/// Returns the value and the truncation error `delta = x - value`, which is
/// exact and satisfies `|delta| < c_m` with the sign of `x`.
pub fn quantize(x: f64, format: FixedFormat) -> Result<(FixedValue, f64), FixedError> {
    if !x.is_finite() {
        return Err(FixedError::NonFinite(x));
    }
    if !format.contains(x) {
        return Err(FixedError::Overflow { value: x, format, limit: format.max_value() });
    }
    // Scaling by a power of two is exact, so is the difference of x and its
    // truncation (it is the discarded low-order part of x).
    let raw = (x * format.scale()).trunc() as i64;
    let value = FixedValue { raw, format };
    Ok((value, x - value.to_f64()))
}

fn same_format(a: &FixedValue, b: &FixedValue) -> Result<FixedFormat, FixedError> {
    if a.format != b.format {
        return Err(FixedError::FormatMismatch(a.format, b.format));
    }
    Ok(a.format)
}

pub fn fp_add(a: FixedValue, b: FixedValue) -> Result<FixedValue, FixedError> {
    let format = same_format(&a, &b)?;
    FixedValue::from_raw(a.raw + b.raw, format)
}

pub fn fp_sub(a: FixedValue, b: FixedValue) -> Result<FixedValue, FixedError> {
    fp_add(a, b.neg())
}

pub fn fp_mul(a: FixedValue, b: FixedValue) -> Result<FixedValue, FixedError> {
    let format = same_format(&a, &b)?;
    let wide = a.raw as i128 * b.raw as i128;
    // Integer division truncates toward zero.
    let raw = wide / (1i128 << format.frac_bits);
    if raw.abs() > format.max_raw() as i128 {
        return Err(FixedError::Overflow {
            value: wide as f64 * format.resolution() * format.resolution(),
            format,
            limit: format.max_value(),
        });
    }
    Ok(FixedValue { raw: raw as i64, format })
}

/// Error bound for addition of two truncated operands: `|d1| + |d2|`.
pub fn fp_add_error_bound(delta1: f64, delta2: f64) -> f64 {
    delta1.abs() + delta2.abs()
}

/// Error bound for multiplication of two truncated operands:
/// `|d1 * F(c2)| + |d2 * F(c1)| + c_m`.
pub fn fp_mul_error_bound(a: FixedValue, b: FixedValue, delta_a: f64, delta_b: f64) -> f64 {
    (delta_a * b.to_f64()).abs() + (delta_b * a.to_f64()).abs() + a.format.resolution()
}

/// Error bound for the quotient `F(c1) / F(c2)` computed at plant precision.
///
/// Evaluates `|(d2*c1 - d1*c2) / (d2^2 - d2*c2)|`. For an exact divisor
/// (`d2 = 0`) the expression degenerates; the limit value `|d1 / c2|`, which
/// is the actual error in that case, is returned instead.
pub fn fp_div_error_bound(c1: f64, c2: f64, delta1: f64, delta2: f64) -> Result<f64, FixedError> {
    if c2 == 0.0 || delta2.abs() >= c2.abs() {
        return Err(FixedError::DivisorTooSmall { divisor: c2, delta: delta2 });
    }
    let numerator = delta2 * c1 - delta1 * c2;
    if numerator == 0.0 {
        return Ok(0.0);
    }
    if delta2 == 0.0 {
        return Ok((delta1 / c2).abs());
    }
    Ok((numerator / (delta2 * delta2 - delta2 * c2)).abs())
}

/// Dot product `sum_i gains[i] * x[i]` evaluated left to right by ascending
/// index with truncating multiplication and exact addition.
///
/// The returned bound covers `|exact - computed|` where `exact` is the real
/// product of the given (already representable) operands: one `c_m` per
/// multiplication.
pub fn dot_fixed(gains: &[FixedValue], x: &[FixedValue]) -> Result<(FixedValue, f64), FixedError> {
    if gains.len() != x.len() {
        return Err(FixedError::LengthMismatch(gains.len(), x.len()));
    }
    let Some(first) = gains.first() else {
        return Err(FixedError::LengthMismatch(0, 0));
    };
    let format = first.format;
    let mut acc = FixedValue::zero(format);
    for (k, v) in gains.iter().zip(x) {
        acc = fp_add(acc, fp_mul(*k, *v)?)?;
    }
    Ok((acc, gains.len() as f64 * format.resolution()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmt(i: u32, f: u32) -> FixedFormat {
        FixedFormat::new(i, f).unwrap()
    }

    #[test]
    fn format_range() {
        let f = fmt(8, 8);
        assert_eq!(f.resolution(), 1.0 / 256.0);
        assert_eq!(f.max_value(), 128.0 + 1.0 - 1.0 / 256.0);
        assert!(FixedFormat::new(0, 4).is_err());
        assert!(FixedFormat::new(40, 20).is_err());
    }

    #[test]
    fn quantize_examples() {
        let f = fmt(8, 8);
        let (v, d) = quantize(0.5, f).unwrap();
        assert_eq!((v.to_f64(), d), (0.5, 0.0));

        let (v, d) = quantize(0.1, f).unwrap();
        assert_eq!(v.to_f64(), 0.09765625);
        assert_eq!(v.raw(), 25);
        // exact rational difference 0.1 - 25/256, evaluated on the f64 input
        assert_eq!(d, 0.1 - 25.0 / 256.0);
        assert!((d - 0.00234375).abs() < 1e-17);

        let err = quantize(129.0, f).unwrap_err();
        assert!(matches!(err, FixedError::Overflow { .. }));
        assert!(quantize(f64::NAN, f).is_err());
    }

    #[test]
    fn negative_truncates_toward_zero() {
        let f = fmt(4, 4);
        let (v, d) = quantize(-0.1, f).unwrap();
        assert_eq!(v.to_f64(), -0.0625);
        assert!(d < 0.0 && d.abs() < f.resolution());
    }

    #[test]
    fn mul_examples() {
        let f = fmt(8, 8);
        let half = FixedValue::exact(0.5, f).unwrap();
        assert_eq!(fp_mul(half, half).unwrap().to_f64(), 0.25);
        let lsb = FixedValue::from_raw(1, f).unwrap();
        assert_eq!(fp_mul(lsb, lsb).unwrap().to_f64(), 0.0);
        let neg = FixedValue::from_raw(-3, f).unwrap();
        // -3/256 * 1/2 = -1.5/256 -> truncates to -1/256
        assert_eq!(fp_mul(neg, half).unwrap().raw(), -1);
    }

    #[test]
    fn add_overflow_and_mismatch() {
        let f = fmt(4, 4);
        let big = FixedValue::exact(8.0, f).unwrap();
        assert!(fp_add(big, big).is_err());
        let other = FixedValue::zero(fmt(8, 8));
        assert!(matches!(fp_add(big, other), Err(FixedError::FormatMismatch(..))));
        assert_eq!(fp_sub(big, big).unwrap().raw(), 0);
    }

    #[test]
    fn div_bound_examples() {
        assert_eq!(fp_div_error_bound(1.0, 2.0, 0.0, 0.0).unwrap(), 0.0);
        let d2: f64 = 1.0 / 256.0;
        let expected = (d2 / (d2 * d2 - d2 * 2.0)).abs();
        assert_eq!(fp_div_error_bound(1.0, 2.0, 0.0, d2).unwrap(), expected);
        assert_eq!(fp_div_error_bound(0.75, 0.75, d2, d2).unwrap(), 0.0);
        assert!(matches!(
            fp_div_error_bound(1.0, 0.01, 0.0, 0.02),
            Err(FixedError::DivisorTooSmall { .. })
        ));
        assert_eq!(fp_div_error_bound(1.0, 4.0, 0.5, 0.0).unwrap(), 0.125);
    }

    #[test]
    fn dot_examples() {
        let f = fmt(8, 8);
        let zero = vec![FixedValue::zero(f); 3];
        let x: Vec<_> = [0.5, -0.25, 0.75].iter().map(|&v| FixedValue::exact(v, f).unwrap()).collect();
        assert_eq!(dot_fixed(&zero, &x).unwrap().0.to_f64(), 0.0);

        let one = [FixedValue::exact(1.0, f).unwrap()];
        let (u, bound) = dot_fixed(&one, &x[..1]).unwrap();
        assert_eq!(u.to_f64(), 0.5);
        assert_eq!(bound, f.resolution());
        assert!(dot_fixed(&one, &x).is_err());
    }
}
