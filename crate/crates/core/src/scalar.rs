//! Scalar abstractions.
//!
//! Two families of numbers flow through the crate:
//!
//! * [`Real`]: floating point types used by the classifier head, training and
//!   co-occurrence probabilities (`f32`, `f64`).
//! * [`Similarity`]: ordered field types used for behavior-pattern similarity
//!   scores during clustering. Floats compare with a small tie tolerance;
//!   rationals compare exactly.

use std::fmt::{Debug, Display};
use std::ops::{Add, Div};

use num_bigint::BigInt;
use num_rational::{BigRational, Rational64};
use num_traits::{Float, FromPrimitive, One, ToPrimitive, Zero};

/// Floating point scalar for dense linear algebra.
pub trait Real:
    Float + ndarray::ScalarOperand + num_traits::NumAssign + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; never fails for finite inputs.
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Similarity score type: built from count ratios, totally ordered up to ties.
pub trait Similarity:
    Clone + Debug + PartialOrd + Zero + One + Add<Output = Self> + Div<Output = Self> + Send + Sync
{
    /// `num / den`; callers guarantee `den > 0`.
    fn ratio(num: u64, den: u64) -> Self;

    /// True when `self` is larger than `other` by more than the tie tolerance.
    fn exceeds(&self, other: &Self) -> bool;

    fn to_f64(&self) -> f64;

    /// Lossless text form (`"1/3"` for rationals, shortest round-trip for floats).
    fn to_text(&self) -> String;

    fn parse_text(s: &str) -> Option<Self>;
}

/// Tolerance used for tie detection between floating point similarity scores.
pub const FLOAT_TIE_TOLERANCE: f64 = 1e-12;

macro_rules! float_similarity {
    ($t:ty) => {
        impl Similarity for $t {
            fn ratio(num: u64, den: u64) -> Self {
                num as $t / den as $t
            }

            fn exceeds(&self, other: &Self) -> bool {
                (*self as f64) > (*other as f64) + FLOAT_TIE_TOLERANCE
            }

            fn to_f64(&self) -> f64 {
                *self as f64
            }

            fn to_text(&self) -> String {
                format!("{:?}", self)
            }

            fn parse_text(s: &str) -> Option<Self> {
                s.trim().parse().ok()
            }
        }
    };
}

float_similarity!(f32);
float_similarity!(f64);

fn parse_fraction(s: &str) -> Option<(&str, &str)> {
    let s = s.trim();
    Some(s.split_once('/').unwrap_or((s, "1")))
}

impl Similarity for Rational64 {
    fn ratio(num: u64, den: u64) -> Self {
        Rational64::new(
            i64::try_from(num).expect("count fits i64"),
            i64::try_from(den).expect("count fits i64"),
        )
    }

    fn exceeds(&self, other: &Self) -> bool {
        self > other
    }

    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }

    fn to_text(&self) -> String {
        self.to_string()
    }

    fn parse_text(s: &str) -> Option<Self> {
        let (n, d) = parse_fraction(s)?;
        let d: i64 = d.trim().parse().ok()?;
        if d == 0 {
            return None;
        }
        Some(Rational64::new(n.trim().parse().ok()?, d))
    }
}

impl Similarity for BigRational {
    fn ratio(num: u64, den: u64) -> Self {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    fn exceeds(&self, other: &Self) -> bool {
        self > other
    }

    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }

    fn to_text(&self) -> String {
        self.to_string()
    }

    fn parse_text(s: &str) -> Option<Self> {
        let (n, d) = parse_fraction(s)?;
        let d: BigInt = d.trim().parse().ok()?;
        if d.is_zero() {
            return None;
        }
        Some(BigRational::new(n.trim().parse().ok()?, d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_text_round_trip() {
        let third = Rational64::ratio(2, 6);
        assert_eq!(third.to_text(), "1/3");
        assert_eq!(Rational64::parse_text("1/3"), Some(third));
        assert_eq!(Rational64::parse_text("4"), Some(Rational64::from_integer(4)));
        assert_eq!(Rational64::parse_text("1/0"), None);
        let big = BigRational::ratio(3, 9);
        assert_eq!(BigRational::parse_text(&big.to_text()), Some(big));
    }

    #[test]
    fn float_ties_use_tolerance() {
        let a = 1.0_f64 / 3.0;
        assert!(!(a + 1e-14).exceeds(&a));
        assert!((a + 1e-9).exceeds(&a));
        assert_eq!(f64::parse_text(&a.to_text()), Some(a));
    }

    #[test]
    fn rational_ties_are_exact() {
        let a = Rational64::ratio(1, 3);
        let b = Rational64::ratio(2, 6);
        assert!(!a.exceeds(&b));
        assert!(Rational64::ratio(1_000_000_001, 3_000_000_000).exceeds(&a));
    }
}
