//! Non-separable Gneiting space-time correlation, the circular annual-cycle
//! kernel, the symmetric square root used for coregionalization, and the
//! summary quantities reported from a fit (practical ranges, variance
//! decomposition, cross-correlations).

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::spacetime::{lag, Lag, SpaceTimePoint};
use crate::{Error, Result, N_RESPONSES};

/// Smoothness/shape exponents of the Gneiting family, frozen at the values
/// used throughout: tau = 1, alpha = 1, gamma = 0.5.
pub const TAU: f64 = 1.0;
pub const ALPHA: f64 = 1.0;
pub const GAMMA: f64 = 0.5;

/// Rows beyond which `joint_covariance` refuses to build a dense matrix.
pub const DEFAULT_DENSE_LIMIT: usize = 2000;

/// Correlation level defining the practical range.
const PRACTICAL_LEVEL: f64 = 0.05;

/// Parameters of one component's Gneiting correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GneitingParams {
    /// Spatial decay, km^-1.
    pub phi_sp: f64,
    /// Temporal decay, years^-2.
    pub phi_ti: f64,
    /// Space-time interaction in [0, 1]; 0 gives separability.
    pub eta: f64,
}

impl GneitingParams {
    pub fn new(phi_sp: f64, phi_ti: f64, eta: f64) -> Result<Self> {
        if !(phi_sp > 0.0) || !(phi_ti > 0.0) {
            return Err(Error::Config(format!(
                "Gneiting decay parameters must be positive: phi_sp={phi_sp}, phi_ti={phi_ti}"
            )));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!("eta must lie in [0,1], got {eta}")));
        }
        Ok(GneitingParams { phi_sp, phi_ti, eta })
    }
}

/// Parameters of one component's annual-cycle kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicalParams {
    /// Variance of the monthly effect, model-scale units.
    pub sigma2_cy: f64,
    /// Circular decay, years^-1.
    pub phi_cy: f64,
}

impl CyclicalParams {
    pub fn new(sigma2_cy: f64, phi_cy: f64) -> Result<Self> {
        if !(sigma2_cy > 0.0) || !(phi_cy > 0.0) {
            return Err(Error::Config(format!(
                "cyclical parameters must be positive: sigma2_cy={sigma2_cy}, phi_cy={phi_cy}"
            )));
        }
        Ok(CyclicalParams { sigma2_cy, phi_cy })
    }
}

/// Gneiting correlation under the frozen exponents:
/// (phi_ti h_t^2 + 1)^-1 * exp(-phi_sp h_s / (phi_ti h_t^2 + 1)^(eta/2)).
pub fn gneiting_corr(lag: &Lag, p: &GneitingParams) -> f64 {
    let u = p.phi_ti * lag.h_t * lag.h_t + 1.0;
    (1.0 / u) * (-p.phi_sp * lag.h_s / u.powf(p.eta / 2.0)).exp()
}

/// The general Gneiting form with free exponents; retained as an independent
/// cross-check of the frozen-exponent fast path.
pub fn gneiting_corr_general(
    lag: &Lag,
    p: &GneitingParams,
    tau: f64,
    alpha: f64,
    gamma: f64,
) -> f64 {
    let u = p.phi_ti * lag.h_t.abs().powf(2.0 * alpha) + 1.0;
    u.powf(-tau) * (-p.phi_sp * lag.h_s.powf(2.0 * gamma) / u.powf(p.eta * gamma)).exp()
}

/// Annual-cycle covariance sigma2_cy * exp(-phi_cy * d_circ), using the
/// geodesic circular lag so the kernel is symmetric and valid on the circle.
pub fn cyclical_cov(lag: &Lag, p: &CyclicalParams) -> f64 {
    p.sigma2_cy * (-p.phi_cy * lag.d_circ).exp()
}

/// The coregionalization triple: Sigma, its symmetric square root A, and the
/// rank-1 column products T_i = a_i a_i'.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coregionalization {
    pub sigma: Matrix3<f64>,
    pub a_matrix: Matrix3<f64>,
    pub t_matrices: [Matrix3<f64>; N_RESPONSES],
}

/// Symmetric square root A = Psi Gamma Psi' of an SPD Sigma, where Gamma
/// holds the square-rooted eigenvalues. Unlike a Cholesky factor, A does not
/// impose an ordering on the responses: permuting Sigma permutes A the same
/// way.
pub fn sym_sqrt(sigma: &Matrix3<f64>) -> Result<Coregionalization> {
    let asym = (sigma - sigma.transpose()).norm();
    if asym > 1e-8 * (1.0 + sigma.norm()) {
        return Err(Error::Config(format!("sigma must be symmetric (asymmetry {asym:.3e})")));
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev <= 1e-10 * max_ev.max(0.0) {
            return Err(Error::NotPositiveDefinite { index: i, value: ev });
        }
    }
    let gamma = Matrix3::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let a = eig.eigenvectors * gamma * eig.eigenvectors.transpose();
    let a = (a + a.transpose()) * 0.5;
    let t_matrices = std::array::from_fn(|i| {
        let col: Vector3<f64> = a.column(i).into();
        col * col.transpose()
    });
    Ok(Coregionalization { sigma: sym, a_matrix: a, t_matrices })
}

/// Cross-covariance block of the coregionalized field at a given lag:
/// sum_i T_i C(lag; theta_i). Equals Sigma at zero lag.
pub fn cross_cov_block(
    lag: &Lag,
    coreg: &Coregionalization,
    thetas: &[GneitingParams; N_RESPONSES],
) -> Matrix3<f64> {
    let mut out = Matrix3::zeros();
    for i in 0..N_RESPONSES {
        out += coreg.t_matrices[i] * gneiting_corr(lag, &thetas[i]);
    }
    out
}

/// Dense 3N x 3N covariance of the field over a point configuration.
/// Used as the exact oracle for the NNGP and for small-N inference checks;
/// refuses configurations beyond `dense_limit` rows.
pub fn joint_covariance(
    points: &[SpaceTimePoint],
    coreg: &Coregionalization,
    thetas: &[GneitingParams; N_RESPONSES],
    period: f64,
    dense_limit: usize,
) -> Result<DMatrix<f64>> {
    let n = points.len();
    let rows = N_RESPONSES * n;
    if rows > dense_limit {
        return Err(Error::DenseLimit(rows, dense_limit));
    }
    let mut cov = DMatrix::zeros(rows, rows);
    for l in 0..n {
        for q in l..n {
            let block = cross_cov_block(&lag(&points[l], &points[q], period), coreg, thetas);
            for a in 0..N_RESPONSES {
                for b in 0..N_RESPONSES {
                    cov[(3 * l + a, 3 * q + b)] = block[(a, b)];
                    cov[(3 * q + b, 3 * l + a)] = block[(a, b)];
                }
            }
        }
    }
    Ok(cov)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeKind {
    Spatial,
    Cyclical,
    Temporal,
}

/// Lag at which the relevant correlation drops to 0.05 with the other lag
/// held at zero. Spatial: 3/phi_sp (km). Cyclical: 3/phi_cy (years).
/// Temporal: sqrt(19/phi_ti) (years), solving (phi_ti h^2 + 1)^-1 = 0.05.
pub fn practical_range(kind: RangeKind, decay: f64) -> f64 {
    match kind {
        // exp(-3) = 0.0498, the conventional "3 / decay" range.
        RangeKind::Spatial | RangeKind::Cyclical => 3.0 / decay,
        RangeKind::Temporal => (1.0 / PRACTICAL_LEVEL - 1.0).sqrt() / decay.sqrt(),
    }
}

/// Proportions of total variance attributable to the seasonal, nugget and
/// space-time components.
pub fn variance_decomposition(
    sigma2_cy: f64,
    sigma2_eps: f64,
    sigma2_omega: f64,
) -> Result<(f64, f64, f64)> {
    if sigma2_cy < 0.0 || sigma2_eps < 0.0 || sigma2_omega < 0.0 {
        return Err(Error::Config("variance components must be >= 0".into()));
    }
    let total = sigma2_cy + sigma2_eps + sigma2_omega;
    if total == 0.0 {
        return Err(Error::Config(
            "variance decomposition undefined for all-zero components".into(),
        ));
    }
    Ok((sigma2_cy / total, sigma2_eps / total, sigma2_omega / total))
}

/// Pairwise correlations (rho_12, rho_13, rho_23) of an SPD Sigma.
pub fn cross_correlations(sigma: &Matrix3<f64>) -> (f64, f64, f64) {
    let s = |i: usize| sigma[(i, i)].sqrt();
    (sigma[(0, 1)] / (s(0) * s(1)), sigma[(0, 2)] / (s(0) * s(2)), sigma[(1, 2)] / (s(1) * s(2)))
}
