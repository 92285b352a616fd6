//! Response transformations, latent-variable censoring, the
//! ecoregion-varying mean, and the point-wise observation likelihood.
//!
//! The three physical observables (rain, tmin, tmax) map to latent
//! responses on the model scale: y1 = rain / rain_scale with zeros censored
//! at 0, y2 = standardized tmin, y3 = (tmax - tmin) / range_scale with zero
//! diurnal range censored at 0. The range transform is scale-only so the
//! censoring boundary stays exactly at zero on the model scale.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, StationRecord};
use crate::dist::{ln_normal_cdf, ln_normal_pdf};
use crate::{Error, Result, N_RESPONSES};

pub const MONTHS: usize = 12;

/// Frozen data-scale transform, computed once from training observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    /// SD of the non-missing rain values (zeros included), mm.
    pub rain_scale: f64,
    pub tmin_center: f64,
    pub tmin_scale: f64,
    /// Kept at zero so that y3 <= 0 is exactly "tmax = tmin".
    pub range_center: f64,
    pub range_scale: f64,
}

impl TransformSpec {
    /// Compute from the non-missing training values.
    pub fn from_dataset(data: &Dataset) -> Result<TransformSpec> {
        let rains: Vec<f64> = data.records.iter().filter_map(|r| r.rain_mm).collect();
        let tmins: Vec<f64> = data.records.iter().filter_map(|r| r.tmin_c).collect();
        let ranges: Vec<f64> = data
            .records
            .iter()
            .filter_map(|r| match (r.tmin_c, r.tmax_c) {
                (Some(lo), Some(hi)) => Some(hi - lo),
                _ => None,
            })
            .collect();
        let sd = |v: &[f64]| -> f64 {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        if rains.len() < 2 || tmins.len() < 2 || ranges.len() < 2 {
            return Err(Error::Data("not enough observed values to compute the transform".into()));
        }
        let spec = TransformSpec {
            rain_scale: sd(&rains),
            tmin_center: tmins.iter().sum::<f64>() / tmins.len() as f64,
            tmin_scale: sd(&tmins),
            range_center: 0.0,
            range_scale: sd(&ranges),
        };
        if !(spec.rain_scale > 0.0 && spec.tmin_scale > 0.0 && spec.range_scale > 0.0) {
            return Err(Error::Data("degenerate (zero-variance) training data".into()));
        }
        Ok(spec)
    }
}

/// Per-(point, response) observation state on the model scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObsFlag {
    /// The latent response equals the transformed observation.
    Observed,
    /// Observed at the boundary (zero rain / zero range); latent <= 0.
    Censored,
    /// Not observed; latent is imputed during MCMC.
    Missing,
}

/// Transformed responses with censoring flags for one record.
pub fn encode_latent(
    record: &StationRecord,
    spec: &TransformSpec,
) -> Result<(Vector3<f64>, [ObsFlag; N_RESPONSES])> {
    record.validate().map_err(Error::Data)?;
    let mut y = Vector3::zeros();
    let mut flags = [ObsFlag::Missing; N_RESPONSES];
    if let Some(rain) = record.rain_mm {
        if rain > 0.0 {
            y[0] = rain / spec.rain_scale;
            flags[0] = ObsFlag::Observed;
        } else {
            flags[0] = ObsFlag::Censored;
        }
    }
    if let Some(tmin) = record.tmin_c {
        y[1] = (tmin - spec.tmin_center) / spec.tmin_scale;
        flags[1] = ObsFlag::Observed;
    }
    if let (Some(lo), Some(hi)) = (record.tmin_c, record.tmax_c) {
        let range = hi - lo;
        if range > 0.0 {
            y[2] = range / spec.range_scale;
            flags[2] = ObsFlag::Observed;
        } else {
            flags[2] = ObsFlag::Censored;
        }
    }
    Ok((y, flags))
}

/// Latent responses back to physical units. Censoring clamps guarantee
/// rain >= 0 and tmax >= tmin for any real-valued input.
pub fn decode_latent(y: &Vector3<f64>, spec: &TransformSpec) -> (f64, f64, f64) {
    let rain = y[0].max(0.0) * spec.rain_scale;
    let tmin = y[1] * spec.tmin_scale + spec.tmin_center;
    let tmax = tmin + y[2].max(0.0) * spec.range_scale;
    (rain, tmin, tmax)
}

/// Ecoregion regression mean: beta0 + beta1 * elevation (km).
#[inline]
pub fn mean_value(beta: &[f64; 2], elevation_km: f64) -> f64 {
    beta[0] + beta[1] * elevation_km
}

/// One point's log-likelihood contribution for one response.
///
/// `residual_mean` is mean + omega + lambda; observed entries contribute a
/// normal density at the latent value, censored entries the mass below
/// zero, missing entries nothing.
pub fn loglik_entry(y: f64, residual_mean: f64, sigma2_eps: f64, flag: ObsFlag) -> f64 {
    let sigma = sigma2_eps.sqrt();
    match flag {
        ObsFlag::Observed => ln_normal_pdf((y - residual_mean) / sigma) - sigma.ln(),
        ObsFlag::Censored => ln_normal_cdf((0.0 - residual_mean) / sigma),
        ObsFlag::Missing => 0.0,
    }
}

/// Full 3-response contribution of one point.
pub fn loglik_point(
    y: &Vector3<f64>,
    mean: &Vector3<f64>,
    omega: &Vector3<f64>,
    lambda: &Vector3<f64>,
    sigma2_eps: &[f64; N_RESPONSES],
    flags: &[ObsFlag; N_RESPONSES],
) -> f64 {
    (0..N_RESPONSES)
        .map(|i| loglik_entry(y[i], mean[i] + omega[i] + lambda[i], sigma2_eps[i], flags[i]))
        .sum()
}

/// The mutable latent state of the sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentState {
    /// Latent responses per point; observed entries stay fixed at the
    /// transformed observation, censored/missing entries are augmented.
    pub y: Vec<Vector3<f64>>,
    pub flags: Vec<[ObsFlag; N_RESPONSES]>,
    /// Space-time process values per point.
    pub omega: Vec<Vector3<f64>>,
    /// Monthly cyclical effects per site and response: lambda[site][resp][month].
    pub lambda: Vec<[[f64; MONTHS]; N_RESPONSES]>,
    /// Regression pairs per (tier label index, response): (intercept, slope).
    pub beta: Vec<[[f64; 2]; N_RESPONSES]>,
    pub sigma2_eps: [f64; N_RESPONSES],
}

impl LatentState {
    /// Initialize from a dataset: observed entries at their transformed
    /// values, censored/missing entries at zero, fields at zero.
    pub fn init(data: &Dataset, spec: &TransformSpec, n_labels: usize) -> Result<LatentState> {
        let mut y = Vec::with_capacity(data.n_points());
        let mut flags = Vec::with_capacity(data.n_points());
        for r in &data.records {
            let (yi, fi) = encode_latent(r, spec)?;
            y.push(yi);
            flags.push(fi);
        }
        Ok(LatentState {
            y,
            flags,
            omega: vec![Vector3::zeros(); data.n_points()],
            lambda: vec![[[0.0; MONTHS]; N_RESPONSES]; data.sites.len()],
            beta: vec![[[0.0; 2]; N_RESPONSES]; n_labels],
            sigma2_eps: [1.0; N_RESPONSES],
        })
    }

    /// Censoring invariant: every censored latent entry is <= 0.
    pub fn censoring_holds(&self) -> bool {
        self.y
            .iter()
            .zip(self.flags.iter())
            .all(|(y, f)| (0..N_RESPONSES).all(|i| f[i] != ObsFlag::Censored || y[i] <= 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec() -> TransformSpec {
        TransformSpec {
            rain_scale: 5.0,
            tmin_center: 4.0,
            tmin_scale: 2.0,
            range_center: 0.0,
            range_scale: 3.0,
        }
    }

    fn rec(rain: Option<f64>, tmin: Option<f64>, tmax: Option<f64>) -> StationRecord {
        StationRecord {
            site_id: 1,
            year: 2000,
            month: 1,
            rain_mm: rain,
            tmin_c: tmin,
            tmax_c: tmax,
        }
    }

    #[test]
    fn encode_censors_zero_rain_and_zero_range() {
        let (y, f) = encode_latent(&rec(Some(0.0), Some(5.0), Some(5.0)), &spec()).unwrap();
        assert_eq!(f[0], ObsFlag::Censored);
        assert_eq!(f[2], ObsFlag::Censored);
        assert_eq!(f[1], ObsFlag::Observed);
        assert_relative_eq!(y[1], 0.5);
        let (y, f) = encode_latent(&rec(Some(10.0), None, None), &spec()).unwrap();
        assert_eq!(f[0], ObsFlag::Observed);
        assert_eq!(f[1], ObsFlag::Missing);
        assert_eq!(f[2], ObsFlag::Missing);
        assert_relative_eq!(y[0], 2.0);
        assert!(encode_latent(&rec(None, Some(5.0), Some(3.0)), &spec()).is_err());
    }

    #[test]
    fn decode_clamps_and_roundtrips() {
        let s = spec();
        let (rain, tmin, tmax) = decode_latent(&Vector3::new(-0.7, 0.0, 0.0), &s);
        assert_eq!(rain, 0.0);
        assert_eq!(tmax, tmin);
        let r = rec(Some(12.5), Some(-1.0), Some(7.5));
        let (y, _) = encode_latent(&r, &s).unwrap();
        let (rain, tmin, tmax) = decode_latent(&y, &s);
        assert_relative_eq!(rain, 12.5, epsilon = 1e-10);
        assert_relative_eq!(tmin, -1.0, epsilon = 1e-10);
        assert_relative_eq!(tmax, 7.5, epsilon = 1e-10);
    }

    #[test]
    fn mean_value_reported_example() {
        // Intercept 0.207, slope -0.747 per km (Table-style x1000 scaling),
        // elevation 1000 m.
        assert_relative_eq!(mean_value(&[0.207, -0.747], 1.0), -0.540, epsilon = 1e-12);
        assert_eq!(mean_value(&[0.0, 0.0], 2.5), 0.0);
    }

    #[test]
    fn loglik_entry_basics() {
        assert_relative_eq!(
            loglik_entry(0.0, 0.0, 1.0, ObsFlag::Observed),
            (1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            loglik_entry(-1.0, 0.0, 4.0, ObsFlag::Censored),
            0.5f64.ln(),
            epsilon = 1e-12
        );
        assert_eq!(loglik_entry(3.0, 1.0, 1.0, ObsFlag::Missing), 0.0);
    }

    #[test]
    fn censored_loglik_matches_quadrature_oracle() {
        // Simpson integration of the normal density over (-inf, 0].
        let quad = |mu: f64, sigma: f64| -> f64 {
            let lo = mu - 14.0 * sigma;
            let n = 40_000;
            let h = (0.0 - lo) / n as f64;
            let pdf = |x: f64| {
                (-0.5 * ((x - mu) / sigma).powi(2)).exp()
                    / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            };
            let mut s = pdf(lo) + pdf(0.0);
            for k in 1..n {
                let x = lo + k as f64 * h;
                s += pdf(x) * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            (s * h / 3.0).ln()
        };
        for &(mu, s2) in &[(0.3, 1.0), (-1.2, 0.5), (2.0, 2.3), (0.0, 0.09)] {
            let got = loglik_entry(0.0, mu, s2, ObsFlag::Censored);
            assert_relative_eq!(got, quad(mu, s2.sqrt()), max_relative = 1e-8);
        }
    }
}
