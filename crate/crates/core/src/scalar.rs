//! Scalar element trait for tensors and scheduler math.
//!
//! Everything numeric in this crate is generic over [`Scalar`]; the crate
//! root exports `f64` aliases, which is what the trainer and the gradient
//! checks use (central finite differences need the headroom of 64-bit).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Numerically stable logistic 1/(1+e^(-x)).
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(0.0f64.sigmoid(), 0.5);
        assert_eq!(0.0f32.sigmoid(), 0.5);
    }

    #[test]
    fn sigmoid_stable_at_extremes() {
        assert!(1000.0f64.sigmoid() <= 1.0);
        assert!((-1000.0f64).sigmoid() >= 0.0);
        assert!((-1000.0f64).sigmoid().is_finite());
    }

    #[test]
    fn sigmoid_symmetry() {
        for x in [-3.0f64, -0.7, 0.1, 2.5] {
            let s = x.sigmoid() + (-x).sigmoid();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }
}
