//! Exact generative simulation: draw the cyclical effects, the space-time
//! field (dense Cholesky for small designs, ancestral NNGP sampling
//! otherwise), add the regression mean and the nugget, then decode to
//! physical units with censoring (zero rain / zero diurnal range where the
//! latent falls at or below the boundary).

use nalgebra::{DVector, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariance::{joint_covariance, sym_sqrt};
use crate::data::{Dataset, Site, StationRecord};
use crate::inference::ParameterSet;
use crate::model::{decode_latent, TransformSpec, MONTHS};
use crate::nngp::{build_graph, build_weight_cache, conditional_draw};
use crate::rng::{substream, Stream};
use crate::spacetime::{canonical_order, month_to_time, SpaceTimePoint};
use crate::{Error, Result, N_RESPONSES};

/// Designs with at most this many rows are simulated by a dense Cholesky.
pub const DENSE_SIM_LIMIT: usize = 500;

#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub sites: Vec<Site>,
    pub start_year: i32,
    pub n_months: usize,
    /// Generative truth.
    pub params: ParameterSet,
    /// Decoding scales from the latent to the physical responses.
    pub transform: TransformSpec,
    /// Probability that a record loses each observable independently.
    pub missing_rate: f64,
    /// Ecoregion tier whose labels index `params.beta`.
    pub tier: usize,
    pub space_weight: f64,
    pub period: f64,
    pub seed: u64,
    /// Neighbor budget for ancestral sampling above [`DENSE_SIM_LIMIT`].
    pub m: usize,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            sites: Vec::new(),
            start_year: 2000,
            n_months: 36,
            params: ParameterSet::default_init(1),
            transform: TransformSpec {
                rain_scale: 30.0,
                tmin_center: 8.0,
                tmin_scale: 6.0,
                range_center: 0.0,
                range_scale: 4.0,
            },
            missing_rate: 0.0,
            tier: 5,
            space_weight: crate::spacetime::DEFAULT_SPACE_WEIGHT,
            period: crate::spacetime::DEFAULT_PERIOD,
            seed: 1,
            m: 15,
        }
    }
}

/// Synthetic dataset plus its generative ground truth, aligned with the
/// dataset's canonical point order.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub data: Dataset,
    pub omega: Vec<Vector3<f64>>,
    pub lambda: Vec<[[f64; MONTHS]; N_RESPONSES]>,
    /// Latent responses before decoding (mean + omega + lambda + eps).
    pub latent: Vec<Vector3<f64>>,
}

/// A rectangular site layout helper: `n` sites uniform over the box, all
/// carrying the given tier labels pattern (cycled).
pub fn uniform_sites(n: usize, extent_km: f64, label_cycle: &[[u32; 5]], seed: u64) -> Vec<Site> {
    let mut rng = substream(seed, Stream::Simulate, &[0]);
    (0..n)
        .map(|i| Site {
            id: i as u32 + 1,
            easting_km: rng.random_range(0.0..extent_km),
            northing_km: rng.random_range(0.0..extent_km),
            elevation_km: rng.random_range(0.0..2.0),
            labels: label_cycle[i % label_cycle.len()],
        })
        .collect()
}

pub fn simulate(spec: &SimulationSpec) -> Result<SimulationOutput> {
    if spec.sites.is_empty() || spec.n_months == 0 {
        return Err(Error::Config("simulation needs at least one site and one month".into()));
    }
    if !(0.0..1.0).contains(&spec.missing_rate) {
        return Err(Error::Config(format!(
            "missing_rate must lie in [0, 1), got {}",
            spec.missing_rate
        )));
    }
    if !(1..=5).contains(&spec.tier) {
        return Err(Error::Config(format!("tier must be in 1..=5, got {}", spec.tier)));
    }
    let mut labels: Vec<u32> = spec.sites.iter().map(|s| s.labels[spec.tier - 1]).collect();
    labels.sort_unstable();
    labels.dedup();
    if spec.params.beta.len() != labels.len() {
        return Err(Error::Config(format!(
            "params.beta has {} label rows but the tier has {} labels",
            spec.params.beta.len(),
            labels.len()
        )));
    }
    let coreg = sym_sqrt(&spec.params.sigma)?;

    // Points in canonical order with a map back to (site index, month k).
    let mut raw: Vec<(usize, usize, SpaceTimePoint)> = Vec::new();
    for (si, s) in spec.sites.iter().enumerate() {
        for k in 0..spec.n_months {
            let year = spec.start_year + (k / MONTHS) as i32;
            let month = (k % MONTHS) as u32 + 1;
            raw.push((
                si,
                k,
                SpaceTimePoint {
                    site_id: s.id,
                    easting: s.easting_km,
                    northing: s.northing_km,
                    time: month_to_time(year, month),
                    elevation: s.elevation_km,
                },
            ));
        }
    }
    let pts: Vec<SpaceTimePoint> = raw.iter().map(|r| r.2).collect();
    let perm = canonical_order(&pts);
    let points: Vec<SpaceTimePoint> = perm.iter().map(|&i| pts[i]).collect();
    let n = points.len();

    // Space-time field.
    let mut rng = substream(spec.seed, Stream::Simulate, &[1]);
    let omega: Vec<Vector3<f64>> = if 3 * n <= 3 * DENSE_SIM_LIMIT {
        let cov = joint_covariance(&points, &coreg, &spec.params.thetas, spec.period, 3 * n)?;
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Numerical("simulation covariance is not SPD".into()))?;
        let z = DVector::from_fn(3 * n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = chol.l() * z;
        (0..n).map(|p| Vector3::new(v[3 * p], v[3 * p + 1], v[3 * p + 2])).collect()
    } else {
        let graph = build_graph(&points, spec.m, spec.space_weight, spec.period)?;
        let weights = build_weight_cache(&graph, &coreg, &spec.params.thetas)?;
        let mut omega = vec![Vector3::zeros(); n];
        let mut vals = DVector::zeros(3 * spec.m);
        for p in 0..n {
            let nbrs = &graph.neighbors[p];
            for (j, &q) in nbrs.iter().enumerate() {
                vals[3 * j] = omega[q][0];
                vals[3 * j + 1] = omega[q][1];
                vals[3 * j + 2] = omega[q][2];
            }
            let head = DVector::from_column_slice(&vals.as_slice()[..3 * nbrs.len()]);
            omega[p] = conditional_draw(weights.at(p), &head, &mut rng);
        }
        omega
    };

    // Cyclical effects, independent across sites and responses.
    let mut lambda = vec![[[0.0; MONTHS]; N_RESPONSES]; spec.sites.len()];
    for si in 0..spec.sites.len() {
        for i in 0..N_RESPONSES {
            let mut rng =
                substream(spec.seed, Stream::Simulate, &[2, (si * N_RESPONSES + i) as u64]);
            let p = &spec.params.cyclical[i];
            let k = crate::inference::cyclical_corr_matrix(p.phi_cy, spec.period) * p.sigma2_cy;
            let chol = k
                .cholesky()
                .ok_or_else(|| Error::Numerical("cyclical covariance is not SPD".into()))?;
            let z = nalgebra::SVector::<f64, MONTHS>::from_fn(|_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let draw = chol.l() * z;
            for mo in 0..MONTHS {
                lambda[si][i][mo] = draw[mo];
            }
        }
    }

    // Assemble records in the canonical point order.
    let mut eps_rng = substream(spec.seed, Stream::Simulate, &[3]);
    let mut miss_rng = substream(spec.seed, Stream::Simulate, &[4]);
    let mut latent = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for (rank, &orig) in perm.iter().enumerate() {
        let (si, k, _) = raw[orig];
        let site = &spec.sites[si];
        let lab = labels
            .binary_search(&site.labels[spec.tier - 1])
            .expect("label present by construction");
        let mo = k % MONTHS;
        let mut y = Vector3::zeros();
        for i in 0..N_RESPONSES {
            let mean =
                spec.params.beta[lab][i][0] + spec.params.beta[lab][i][1] * site.elevation_km;
            let eps = spec.params.sigma2_eps[i].sqrt() * eps_rng.sample::<f64, _>(StandardNormal);
            y[i] = mean + omega[rank][i] + lambda[si][i][mo] + eps;
        }
        latent.push(y);
        let (rain, tmin, tmax) = decode_latent(&y, &spec.transform);
        let drop = |rng: &mut rand_chacha::ChaCha8Rng, rate: f64| rng.random::<f64>() < rate;
        let miss_rain = drop(&mut miss_rng, spec.missing_rate);
        let miss_temp = drop(&mut miss_rng, spec.missing_rate);
        let year = spec.start_year + (k / MONTHS) as i32;
        records.push(StationRecord {
            site_id: site.id,
            year,
            month: mo as u32 + 1,
            rain_mm: if miss_rain { None } else { Some(rain) },
            tmin_c: if miss_temp { None } else { Some(tmin) },
            tmax_c: if miss_temp { None } else { Some(tmax) },
        });
    }
    let data = Dataset::from_records(spec.sites.clone(), records)?;
    // Dataset re-derives the same canonical order, so the ground-truth
    // fields stay aligned with data.points.
    debug_assert_eq!(data.points, points);
    Ok(SimulationOutput { data, omega, lambda, latent })
}
