//! Scalar abstraction shared by the numeric modules.
//!
//! Geometry, sampling, the networks and the wavelet transform are written
//! against [`Real`], so they run at `f32` for storage-sized experiments and at
//! `f64` for training and gradient checks. Transcendental functions go through
//! `libm` rather than the platform math library: the decoder must reproduce
//! the encoder's probabilities bit for bit on any host.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal or intermediate.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn exp_det(self) -> Self;

    fn ln_det(self) -> Self;

    fn ln_1p_det(self) -> Self;

    fn erfc_det(self) -> Self;

    /// `ln(1 + e^x)` without overflow for large `x`.
    fn softplus(self) -> Self {
        if self > Self::zero() {
            self + (-self).exp_det().ln_1p_det()
        } else {
            self.exp_det().ln_1p_det()
        }
    }

    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp_det())
        } else {
            let e = self.exp_det();
            e / (Self::one() + e)
        }
    }
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp_det(self) -> Self {
        libm::expf(self)
    }
    #[inline]
    fn ln_det(self) -> Self {
        libm::logf(self)
    }
    #[inline]
    fn ln_1p_det(self) -> Self {
        libm::log1pf(self)
    }
    #[inline]
    fn erfc_det(self) -> Self {
        libm::erfcf(self)
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp_det(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln_det(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn ln_1p_det(self) -> Self {
        libm::log1p(self)
    }
    #[inline]
    fn erfc_det(self) -> Self {
        libm::erfc(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for &x in &[-20.0f64, -3.0, -0.5, 0.0, 0.5, 3.0, 20.0] {
            let naive = (1.0 + x.exp()).ln();
            assert!((x.softplus() - naive).abs() < 1e-14, "x={x}");
        }
        assert_eq!(0.0f64.softplus(), std::f64::consts::LN_2);
        assert!(800.0f64.softplus().is_finite());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(0.0f64.sigmoid(), 0.5);
        assert!((-800.0f64).sigmoid() >= 0.0);
        assert_eq!(800.0f64.sigmoid(), 1.0);
        assert!((2.0f32.sigmoid() - 0.880_797).abs() < 1e-6);
    }
}
