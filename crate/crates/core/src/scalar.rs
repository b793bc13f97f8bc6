use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar the numeric core is generic over.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal. Never fails for `f32`/`f64`.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }

    /// `[sign(v)]⁺`: one for strictly positive values, zero otherwise.
    #[inline]
    fn step(self) -> Self {
        if self > Self::zero() {
            Self::one()
        } else {
            Self::zero()
        }
    }

    /// Sign with `sign(0) = 0`.
    #[inline]
    fn sign0(self) -> Self {
        if self > Self::zero() {
            Self::one()
        } else if self < Self::zero() {
            -Self::one()
        } else {
            Self::zero()
        }
    }

    #[inline]
    fn pos(self) -> Self {
        if self > Self::zero() {
            self
        } else {
            Self::zero()
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_conventions() {
        assert_eq!(0.0f64.sign0(), 0.0);
        assert_eq!((-2.0f64).sign0(), -1.0);
        assert_eq!(0.0f32.step(), 0.0);
        assert_eq!(3.0f32.step(), 1.0);
        assert_eq!((-1.5f64).pos(), 0.0);
    }
}
