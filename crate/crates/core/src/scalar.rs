//! Numeric types the evaluation metrics can be computed in.

use std::fmt::{Debug, Display};

use num_rational::Ratio;
use num_traits::{Signed, ToPrimitive};

/// Signed field-like scalar: `f32`, `f64` or the exact `Ratio<i128>`.
pub trait Scalar: Signed + PartialOrd + Clone + Debug + Display + Send + Sync {
    fn from_i128(v: i128) -> Self;
    fn to_f64(&self) -> f64;
}

impl Scalar for f32 {
    fn from_i128(v: i128) -> Self {
        v as f32
    }
    fn to_f64(&self) -> f64 {
        f64::from(*self)
    }
}

impl Scalar for f64 {
    fn from_i128(v: i128) -> Self {
        v as f64
    }
    fn to_f64(&self) -> f64 {
        *self
    }
}

impl Scalar for Ratio<i128> {
    fn from_i128(v: i128) -> Self {
        Ratio::from_integer(v)
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions() {
        assert_eq!(<f32 as Scalar>::from_i128(3), 3.0);
        assert_eq!(Ratio::<i128>::from_i128(-4), Ratio::from_integer(-4));
        assert_eq!(Scalar::to_f64(&Ratio::new(1i128, 4)), 0.25);
    }
}
