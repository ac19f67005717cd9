//! Standard normal distribution helpers built on the complementary error
//! function, so that upper tails stay accurate far beyond |t| = 8.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, FRAC_2_SQRT_PI, SQRT_2};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn phi(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, `erfc(-x / sqrt 2) / 2`.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Phi(x)`.
#[inline]
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// `P(|Z| > t)` for `t >= 0`; also the two-sided p-value of a statistic `t`.
#[inline]
pub fn two_sided_tail(t: f64) -> f64 {
    erfc(t.abs() * FRAC_1_SQRT_2).min(1.0)
}

/// Inverse of [`two_sided_tail`] on `(0, 1]`: the `t >= 0` with `P(|Z| > t) = q`.
/// Returns 0 for `q >= 1` and `+inf` for `q <= 0`.
pub fn two_sided_tail_inv(q: f64) -> f64 {
    if q >= 1.0 {
        0.0
    } else if q <= 0.0 {
        f64::INFINITY
    } else {
        let mut x = erfc_inv(q);
        // One Newton step against the forward function keeps the pair consistent.
        x += (erfc(x) - q) / (FRAC_2_SQRT_PI * (-x * x).exp());
        SQRT_2 * x
    }
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        -SQRT_2 * erfc_inv(2.0 * p)
    }
}
