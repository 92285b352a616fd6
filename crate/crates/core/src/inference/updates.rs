//! Full-conditional and Metropolis building blocks used by the chain.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SMatrix, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};

use crate::model::MONTHS;
use crate::spacetime::Lag;
use crate::{Error, Result};

/// Conjugate draw for one regression block: prior N(0, prior_var I),
/// likelihood residuals r = X beta + eps with noise variance sigma2.
/// `xtx` and `xtr` are the accumulated X'X and X'r.
pub fn conjugate_linear_draw(
    xtx: &Matrix2<f64>,
    xtr: &Vector2<f64>,
    sigma2: f64,
    prior_var: f64,
    rng: &mut impl Rng,
) -> Result<[f64; 2]> {
    let q = xtx / sigma2 + Matrix2::identity() / prior_var;
    let b = xtr / sigma2;
    let chol =
        q.cholesky().ok_or_else(|| Error::Numerical("singular regression precision".into()))?;
    let mean = chol.solve(&b);
    // mean + L^-T z.
    let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
    let l = chol.l();
    let x = l
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok([mean[0] + x[0], mean[1] + x[1]])
}

/// Draw from N(Q^-1 b, Q^-1) for a 3x3 precision.
pub fn mvn_draw_from_precision3(
    q: &Matrix3<f64>,
    b: &Vector3<f64>,
    rng: &mut impl Rng,
) -> Result<Vector3<f64>> {
    let chol = q.cholesky().ok_or_else(|| Error::Numerical("non-SPD 3x3 precision".into()))?;
    let mean = chol.solve(b);
    let z = Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    let x = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok(mean + x)
}

/// Draw from N(Q^-1 b, Q^-1) for a dynamic precision.
pub fn mvn_draw_from_precision(
    q: DMatrix<f64>,
    b: &DVector<f64>,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let n = q.nrows();
    let chol = q.cholesky().ok_or_else(|| Error::Numerical("non-SPD precision".into()))?;
    let mean = chol.solve(b);
    let z = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
    let x = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok(mean + x)
}

/// 12x12 circular correlation matrix exp(-phi d_circ(i, j)) over months.
pub fn cyclical_corr_matrix(phi_cy: f64, period: f64) -> SMatrix<f64, MONTHS, MONTHS> {
    SMatrix::from_fn(|i, j| {
        let h_t = (i as f64 - j as f64).abs() * period / MONTHS as f64;
        let lag = Lag::from_distances(0.0, h_t, period);
        (-phi_cy * lag.d_circ).exp()
    })
}

/// Inverse-gamma draw with (shape, rate) parameterization.
pub fn sample_inverse_gamma(shape: f64, rate: f64, rng: &mut impl Rng) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("valid gamma parameters");
    1.0 / rng.sample(g)
}

/// log density (up to a constant) of the inverse-gamma(shape, rate).
pub fn ln_inverse_gamma(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -(shape + 1.0) * x.ln() - rate / x
}

/// log density (up to a constant) of the inverse-Wishart(df, I) at Sigma.
pub fn ln_inverse_wishart_identity(sigma: &Matrix3<f64>, df: f64) -> f64 {
    let p = 3.0;
    match sigma.cholesky() {
        Some(ch) => {
            let ln_det = 2.0 * (0..3).map(|i| ch.l()[(i, i)].ln()).sum::<f64>();
            let inv = ch.inverse();
            -(df + p + 1.0) / 2.0 * ln_det - 0.5 * inv.trace()
        }
        None => f64::NEG_INFINITY,
    }
}

/// Random-walk proposal scale with burn-in adaptation toward a 0.25-0.40
/// acceptance rate, frozen afterwards.
#[derive(Debug, Clone)]
pub struct AdaptiveScale {
    pub scale: f64,
    accepts: usize,
    proposals: usize,
    frozen: bool,
}

const TARGET_ACCEPT: f64 = 0.325;

impl AdaptiveScale {
    pub fn new(scale: f64) -> Self {
        AdaptiveScale { scale, accepts: 0, proposals: 0, frozen: false }
    }

    pub fn record(&mut self, accepted: bool, window: usize) {
        self.proposals += 1;
        if accepted {
            self.accepts += 1;
        }
        if !self.frozen && self.proposals >= window {
            let rate = self.accepts as f64 / self.proposals as f64;
            self.scale *= (rate - TARGET_ACCEPT).exp();
            self.scale = self.scale.clamp(1e-4, 10.0);
            self.accepts = 0;
            self.proposals = 0;
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        // Reported acceptance rates cover the frozen phase only.
        self.accepts = 0;
        self.proposals = 0;
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            f64::NAN
        } else {
            self.accepts as f64 / self.proposals as f64
        }
    }
}

/// Log-Cholesky coordinates of an SPD 3x3 matrix:
/// (ln l11, l21, ln l22, l31, l32, ln l33).
pub fn sigma_to_log_chol(sigma: &Matrix3<f64>) -> Result<[f64; 6]> {
    let ch = sigma
        .cholesky()
        .ok_or_else(|| Error::Numerical("sigma is not positive definite".into()))?;
    let l = ch.l();
    Ok([l[(0, 0)].ln(), l[(1, 0)], l[(1, 1)].ln(), l[(2, 0)], l[(2, 1)], l[(2, 2)].ln()])
}

pub fn log_chol_to_sigma(v: &[f64; 6]) -> Matrix3<f64> {
    let l = Matrix3::new(v[0].exp(), 0.0, 0.0, v[1], v[2].exp(), 0.0, v[3], v[4], v[5].exp());
    l * l.transpose()
}

/// log |d Sigma / d v| for the log-Cholesky coordinates above:
/// p ln 2 + sum_i (p - i + 2) ln l_ii, with p = 3 and i 1-based.
pub fn log_chol_jacobian(v: &[f64; 6]) -> f64 {
    3.0 * std::f64::consts::LN_2 + 4.0 * v[0] + 3.0 * v[2] + 2.0 * v[5]
}

/// Log-Jacobian of the logit transform at x = logit(p): the uniform prior
/// on p contributes ln p + ln(1-p) on the transformed scale.
pub fn logit_jacobian(x: f64) -> f64 {
    // ln sigmoid(x) + ln sigmoid(-x), computed stably.
    -softplus(-x) - softplus(x)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use approx::assert_relative_eq;

    #[test]
    fn conjugate_linear_matches_normal_equations_oracle() {
        // Small synthetic block: assemble the posterior by hand.
        let xs = [(1.0, 0.2), (1.0, 0.8), (1.0, 1.5), (1.0, 0.5)];
        let rs = [0.3, 1.1, 2.0, 0.7];
        let sigma2 = 0.25;
        let prior_var = 100.0;
        let mut xtx = Matrix2::zeros();
        let mut xtr = Vector2::zeros();
        for ((one, e), r) in xs.iter().zip(rs.iter()) {
            let x = Vector2::new(*one, *e);
            xtx += x * x.transpose();
            xtr += x * *r;
        }
        let q = xtx / sigma2 + Matrix2::identity() / prior_var;
        let mean = q.try_inverse().unwrap() * (xtr / sigma2);
        let cov = q.try_inverse().unwrap();
        // Monte Carlo check of the draw's first two moments.
        let mut rng = substream(5, Stream::Fit, &[500]);
        let n = 200_000;
        let (mut s0, mut s1, mut v0, mut v1) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let d = conjugate_linear_draw(&xtx, &xtr, sigma2, prior_var, &mut rng).unwrap();
            s0 += d[0];
            s1 += d[1];
            v0 += (d[0] - mean[0]).powi(2);
            v1 += (d[1] - mean[1]).powi(2);
        }
        assert_relative_eq!(
            s0 / n as f64,
            mean[0],
            epsilon = 3.0 * (cov[(0, 0)] / n as f64).sqrt()
        );
        assert_relative_eq!(
            s1 / n as f64,
            mean[1],
            epsilon = 3.0 * (cov[(1, 1)] / n as f64).sqrt()
        );
        assert_relative_eq!(v0 / n as f64, cov[(0, 0)], max_relative = 0.02);
        assert_relative_eq!(v1 / n as f64, cov[(1, 1)], max_relative = 0.02);
    }

    #[test]
    fn cyclical_corr_matrix_is_circular_and_spd() {
        let r = cyclical_corr_matrix(8.0, 1.0);
        assert_relative_eq!(r[(0, 0)], 1.0);
        // Geodesic: 11 months apart == 1 month apart.
        assert_relative_eq!(r[(0, 11)], r[(0, 1)], epsilon = 1e-14);
        assert_relative_eq!(r[(0, 6)], (-8.0f64 * 0.5).exp(), epsilon = 1e-14);
        assert!(r.cholesky().is_some());
    }

    #[test]
    fn log_chol_roundtrip_and_jacobian() {
        let sigma = Matrix3::new(2.0, 0.3, -0.1, 0.3, 1.5, 0.2, -0.1, 0.2, 0.9);
        let v = sigma_to_log_chol(&sigma).unwrap();
        assert_relative_eq!(log_chol_to_sigma(&v), sigma, epsilon = 1e-12);
        // Finite-difference check of the Jacobian determinant.
        let eps = 1e-6;
        let mut j = nalgebra::SMatrix::<f64, 6, 6>::zeros();
        // Independent entries of Sigma in a fixed order.
        let entries = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];
        for (col, _) in v.iter().enumerate() {
            let mut vp = v;
            vp[col] += eps;
            let mut vm = v;
            vm[col] -= eps;
            let sp = log_chol_to_sigma(&vp);
            let sm = log_chol_to_sigma(&vm);
            for (row, &(a, b)) in entries.iter().enumerate() {
                j[(row, col)] = (sp[(a, b)] - sm[(a, b)]) / (2.0 * eps);
            }
        }
        let fd = j.determinant().abs().ln();
        assert_relative_eq!(log_chol_jacobian(&v), fd, max_relative = 1e-4);
    }

    #[test]
    fn logit_helpers() {
        assert_relative_eq!(sigmoid(logit(0.3)), 0.3, epsilon = 1e-12);
        assert_relative_eq!(logit_jacobian(0.0), (0.25f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn inverse_gamma_moments() {
        let mut rng = substream(6, Stream::Fit, &[501]);
        let (shape, rate) = (3.0, 2.0);
        let n = 200_000;
        let mean_true = rate / (shape - 1.0);
        let s: f64 = (0..n).map(|_| sample_inverse_gamma(shape, rate, &mut rng)).sum();
        assert_relative_eq!(s / n as f64, mean_true, max_relative = 0.02);
    }
}
