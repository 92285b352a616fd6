//! Scalar normal helpers shared by the likelihood, the augmentation step
//! and prediction: stable log CDF, quantiles and truncated-normal draws.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::erf;

pub const LN_SQRT_2PI: f64 = 0.9189385332046727;

/// Standard normal log-density.
#[inline]
pub fn ln_normal_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// log Phi(z), stable into the deep lower tail.
pub fn ln_normal_cdf(z: f64) -> f64 {
    if z > -30.0 {
        (0.5 * erf::erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        // Asymptotic expansion Phi(z) ~ phi(z)/|z| (1 - 1/z^2 + 3/z^4 - ...).
        let z2 = z * z;
        ln_normal_pdf(z) - z.abs().ln() + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    }
}

/// Standard normal quantile (Acklam's rational approximation refined by one
/// Halley step; absolute error far below 1e-12 over (0,1)).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires p in (0,1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    let x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // One Halley refinement against the CDF.
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Draw from N(mu, sigma^2) truncated to (-inf, upper].
///
/// Inverse-CDF in the body of the distribution; Robert's exponential
/// rejection sampler when the mass below `upper` is in the deep tail.
pub fn sample_normal_below(mu: f64, sigma: f64, upper: f64, rng: &mut impl Rng) -> f64 {
    let beta = (upper - mu) / sigma;
    if beta > -5.0 {
        let cap = normal_cdf(beta);
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let z = normal_quantile((u * cap).max(f64::MIN_POSITIVE));
        mu + sigma * z.min(beta)
    } else {
        // Sample z >= -beta from the upper tail, return its reflection.
        let a = -beta;
        loop {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let z = a - u1.ln() / a;
            let u2: f64 = rng.random();
            if u2 <= (-(z - a) * (z - a) / 2.0).exp() {
                return mu - sigma * z;
            }
        }
    }
}

/// Draw from N(mu, sigma^2) (untruncated).
#[inline]
pub fn sample_normal(mu: f64, sigma: f64, rng: &mut impl Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mu + sigma * z
}
