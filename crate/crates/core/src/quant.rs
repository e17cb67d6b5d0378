//! Quantization and Gaussian bin probabilities.

use crate::anchor::AttributeGroup;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const P_MIN: f64 = 1e-10;
pub const SIGMA_MIN: f64 = 1e-6;
pub const DEFAULT_STEPS: [f64; 3] = [0.05, 0.01, 0.01];
/// Largest quantized magnitude accepted by [`quantize_eval`].
pub const SYMBOL_LIMIT: i64 = i32::MAX as i64;

/// Per-group quantization steps in [`AttributeGroup`] order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantConfig {
    pub steps: [f64; 3],
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS }
    }
}

impl QuantConfig {
    pub fn new(steps: [f64; 3]) -> Result<Self> {
        let c = Self { steps };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (g, q) in AttributeGroup::ALL.iter().zip(self.steps) {
            if !(q > 0.0) || !q.is_finite() || !((q as f32) > 0.0) {
                return Err(Error::validation(format!("quantization step for {} must be positive, got {q}", g.name())));
            }
        }
        Ok(())
    }

    pub fn step(&self, g: AttributeGroup) -> f64 {
        self.steps[g.index()]
    }

    /// Steps as stored in a container header (fp32).
    pub fn as_stored(&self) -> Self {
        Self { steps: self.steps.map(|q| q as f32 as f64) }
    }
}

/// Training-time noise proxy `v + u q` with `u` in `[-0.5, 0.5]`.
#[inline]
pub fn quantize_train<T: Real>(v: T, q: T, u: T) -> T {
    v + u * q
}

/// Round half away from zero to an integer symbol; returns `(s, s q)`.
pub fn quantize_eval<T: Real>(v: T, q: T) -> Result<(i64, T)> {
    let r = (v / q).round();
    if !r.is_finite() || r.abs() > T::lit(SYMBOL_LIMIT as f64) {
        return Err(Error::Range(format!("value {v} with step {q} quantizes outside +-{SYMBOL_LIMIT}")));
    }
    let s = r.to_i64().expect("bounded by SYMBOL_LIMIT");
    Ok((s, T::lit(s as f64) * q))
}

/// Standard normal CDF through `erfc`, accurate in both tails.
#[inline]
pub fn normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (-x / T::lit(std::f64::consts::SQRT_2)).erfc_det()
}

#[inline]
pub fn normal_pdf<T: Real>(x: T) -> T {
    (T::lit(-0.5) * x * x).exp_det() * T::lit(0.398_942_280_401_432_7)
}

/// Unclamped Gaussian mass over `[lo, hi]` in standardized units. Evaluated on
/// the lower tail side so bins far from the mean keep relative precision.
#[inline]
pub fn interval_mass<T: Real>(lo: T, hi: T) -> T {
    if lo > T::zero() {
        normal_cdf(-lo) - normal_cdf(-hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

/// Probability of symbol `s` under `N(mu, sigma)` binned at step `q`, at least [`P_MIN`].
pub fn coeff_probability(s: i64, mu: f64, sigma: f64, q: f64) -> f64 {
    let c = s as f64 * q;
    bin_probability(c, mu, sigma, q)
}

/// Mass of the bin of width `q` centred at `x`, clamped at [`P_MIN`].
pub fn bin_probability<T: Real>(x: T, mu: T, sigma: T, q: T) -> T {
    let half = q * T::lit(0.5);
    let lo = (x - half - mu) / sigma;
    let hi = (x + half - mu) / sigma;
    interval_mass(lo, hi).max(T::lit(P_MIN))
}

/// Bits of one coefficient and their partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinBits<T> {
    pub bits: T,
    pub d_x: T,
    pub d_mu: T,
    pub d_sigma: T,
}

/// `-log2 p` of the bin centred at `x` with gradients w.r.t. `x`, `mu`, `sigma`.
/// The gradients vanish where the probability is clamped.
pub fn bin_bits<T: Real>(x: T, mu: T, sigma: T, q: T) -> BinBits<T> {
    let half = q * T::lit(0.5);
    let lo = (x - half - mu) / sigma;
    let hi = (x + half - mu) / sigma;
    let raw = interval_mass(lo, hi);
    let ln2 = T::lit(std::f64::consts::LN_2);
    if !(raw > T::lit(P_MIN)) {
        let zero = T::zero();
        return BinBits { bits: -T::lit(P_MIN).ln_det() / ln2, d_x: zero, d_mu: zero, d_sigma: zero };
    }
    let (phi_lo, phi_hi) = (normal_pdf(lo), normal_pdf(hi));
    // dp/dx = (phi(hi) - phi(lo)) / sigma, dp/dmu = -dp/dx,
    // dp/dsigma = -(hi phi(hi) - lo phi(lo)) / sigma
    let dp_dx = (phi_hi - phi_lo) / sigma;
    let dp_dsigma = -(hi * phi_hi - lo * phi_lo) / sigma;
    let dbits_dp = -T::one() / (raw * ln2);
    BinBits {
        bits: -raw.ln_det() / ln2,
        d_x: dbits_dp * dp_dx,
        d_mu: -dbits_dp * dp_dx,
        d_sigma: dbits_dp * dp_dsigma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Simpson integration of the normal density, an oracle independent of erfc.
    fn simpson_cdf(x: f64) -> f64 {
        let n = 20000;
        let h = x.abs() / n as f64;
        let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(0.0) + f(x.abs());
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let half = s * h / 3.0;
        if x >= 0.0 { 0.5 + half } else { 0.5 - half }
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert_eq!(normal_cdf(0.0f64), 0.5);
        assert!((normal_cdf(1.959964f64) - 0.975).abs() < 1e-6);
        for x in [-4.0, -1.3, -0.2, 0.5, 1.0, 2.5, 3.0, 6.0] {
            assert!((normal_cdf(x) - simpson_cdf(x)).abs() < 1e-12, "x={x}");
        }
        for x in [0.5f64, 1.0, 3.0] {
            assert!((normal_cdf(-x) - (1.0 - normal_cdf(x))).abs() < 1e-12);
        }
        let mut prev = 0.0;
        for i in -4000..4000 {
            let v = normal_cdf(i as f64 * 0.003);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn quantize_eval_examples() {
        assert_eq!(quantize_eval(0.04999f64, 0.1).unwrap(), (0, 0.0));
        let (s, r) = quantize_eval(-0.05f64, 0.1).unwrap();
        assert_eq!(s, -1);
        assert!((r + 0.1).abs() < 1e-15);
        let (s, r) = quantize_eval(1.234f64, 0.01).unwrap();
        assert_eq!(s, 123);
        assert!((r - 1.23).abs() < 1e-12);
        assert!(matches!(quantize_eval(1e12f64, 1e-3), Err(Error::Range(_))));
    }

    #[test]
    fn quantize_train_examples() {
        assert_eq!(quantize_train(0.7f64, 0.1, 0.0), 0.7);
        assert!((quantize_train(1.0f64, 0.1, 0.5) - 1.05).abs() < 1e-15);
        // the proxy is uniform on [v - q/2, v + q/2]
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bins = [0usize; 10];
        for _ in 0..100_000 {
            let u: f64 = rng.random_range(-0.5..0.5);
            let y = quantize_train(2.0, 0.5, u);
            assert!((1.75..=2.25).contains(&y));
            bins[(((y - 1.75) / 0.05) as usize).min(9)] += 1;
        }
        for b in bins {
            assert!((b as f64 - 10_000.0).abs() < 500.0, "{bins:?}");
        }
    }

    #[test]
    fn coeff_probability_examples() {
        let p = coeff_probability(0, 0.0, 1.0, 1.0);
        assert!((p - 0.382_924_922_548_026).abs() < 1e-12);
        // before clamping the bin masses telescope to 1
        let total: f64 = (-100..=100).map(|s| interval_mass(s as f64 - 0.5, s as f64 + 0.5)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let (mu, sigma, q) = (0.3, 0.2, 0.1);
        let best = (-20..20).max_by(|&a, &b| {
            coeff_probability(a, mu, sigma, q).partial_cmp(&coeff_probability(b, mu, sigma, q)).unwrap()
        });
        assert_eq!(best, Some(3));
        assert_eq!(coeff_probability(1000, 0.0, 1.0, 1.0), P_MIN);
    }

    #[test]
    fn bits_examples() {
        // a bin [0, 1e9] holds half of the mass
        let half = bin_bits(5e8f64, 0.0, 1.0, 1e9);
        assert!((half.bits - 1.0).abs() < 1e-12);
        let clamped = bin_bits(100.0f64, 0.0, 1.0, 0.01);
        assert!((clamped.bits - 33.219_280_948_873_62).abs() < 1e-9);
        assert_eq!(clamped.d_mu, 0.0);
    }

    #[test]
    fn bits_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x: f64 = rng.random_range(-1.0..1.0);
            let mu: f64 = rng.random_range(-1.0..1.0);
            let sigma: f64 = rng.random_range(0.05..1.0);
            let q: f64 = rng.random_range(0.01..0.3);
            let g = bin_bits(x, mu, sigma, q);
            if g.bits > 30.0 {
                continue;
            }
            let f = |x: f64, mu: f64, s: f64| bin_bits(x, mu, s, q).bits;
            let h = 1e-6;
            let fx = (f(x + h, mu, sigma) - f(x - h, mu, sigma)) / (2.0 * h);
            let fm = (f(x, mu + h, sigma) - f(x, mu - h, sigma)) / (2.0 * h);
            let fs = (f(x, mu, sigma + h) - f(x, mu, sigma - h)) / (2.0 * h);
            for (a, n) in [(g.d_x, fx), (g.d_mu, fm), (g.d_sigma, fs)] {
                assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-3) < 1e-5, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn quant_config_rejects_nonpositive_steps() {
        assert!(QuantConfig::new([0.05, 0.0, 0.01]).is_err());
        assert!(QuantConfig::new([0.05, -1.0, 0.01]).is_err());
        assert!(QuantConfig::new([1e-60, 0.01, 0.01]).is_err());
        assert_eq!(QuantConfig::default().as_stored().steps[0], 0.05f32 as f64);
    }
}
