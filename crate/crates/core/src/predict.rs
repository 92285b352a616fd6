//! Posterior prediction at grid points, prediction of the annual-cycle
//! component, and the holdout validation harness.
//!
//! Grid series are sampled sequentially per site and draw: the space-time
//! value at a grid month conditions on the m nearest points among all
//! observed points (any time) plus the same site's previously sampled grid
//! months — never other grid sites — so per-site tasks are independent.
//! Cyclical effects at an unobserved site come from their prior (site
//! independence carries no information across sites); at a site coincident
//! with a station they reuse that station's archived draws.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DVector, SVector, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::covariance::{sym_sqrt, Coregionalization};
use crate::data::{Dataset, Site, StationRecord};
use crate::inference::{cyclical_corr_matrix, PosteriorArchive};
use crate::model::{decode_latent, MONTHS};
use crate::nngp::{conditional_draw, kriging_weights};
use crate::rng::{substream, Stream};
use crate::spacetime::{combined_distance_unchecked, lag, month_to_time, SpaceTimePoint};
use crate::{Error, Result, N_RESPONSES};

/// Summary of one scalar predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryStats {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

/// Quantiles by linear interpolation on the sorted sample.
pub fn summarize(samples: &mut [f64]) -> SummaryStats {
    assert!(!samples.is_empty());
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let q = |p: f64| -> f64 {
        let h = p * (n - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        samples[lo] + (h - lo as f64) * (samples[hi] - samples[lo])
    };
    SummaryStats { mean, sd: var.sqrt(), q025: q(0.025), q50: q(0.5), q975: q(0.975) }
}

/// What to predict: grid sites and a consecutive month range.
#[derive(Debug, Clone)]
pub struct PredictionTask {
    pub grid_sites: Vec<Site>,
    pub start_year: i32,
    pub n_months: usize,
    /// Number of archived draws to use (evenly strided); 0 means all.
    pub draw_subsample: usize,
}

/// Predictive summaries of one grid point-month, on the latent model scale
/// and decoded to physical units (rain, tmin, tmax).
#[derive(Debug, Clone)]
pub struct PointPrediction {
    pub site_id: u32,
    pub easting_km: f64,
    pub northing_km: f64,
    pub year: i32,
    pub month: u32,
    pub model: [SummaryStats; N_RESPONSES],
    pub physical: [SummaryStats; N_RESPONSES],
}

#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub points: Vec<PointPrediction>,
}

/// Posterior summary of the monthly cyclical effects at one grid site.
#[derive(Debug, Clone)]
pub struct SeasonalSummary {
    pub site_id: u32,
    /// Calendar month 1..=12.
    pub month: u32,
    pub stats: [SummaryStats; N_RESPONSES],
}

fn draw_indices(n_draws: usize, subsample: usize) -> Vec<usize> {
    if subsample == 0 || subsample >= n_draws {
        (0..n_draws).collect()
    } else {
        (0..subsample).map(|j| j * n_draws / subsample).collect()
    }
}

fn check_task(task: &PredictionTask, archive: &PosteriorArchive, data: &Dataset) -> Result<()> {
    if task.grid_sites.is_empty() || task.n_months == 0 {
        return Err(Error::Config("prediction needs at least one grid site and one month".into()));
    }
    if archive.latent.is_empty() {
        return Err(Error::ArchiveMismatch(
            "archive holds no latent draws; refit with store_latent".into(),
        ));
    }
    if data.n_points() != archive.n_points || data.sites.len() != archive.n_sites {
        return Err(Error::ArchiveMismatch(format!(
            "dataset has {} points / {} sites, archive was fit on {} / {}",
            data.n_points(),
            data.sites.len(),
            archive.n_points,
            archive.n_sites
        )));
    }
    let tier = archive.config.tier;
    for s in &task.grid_sites {
        if archive.labels.binary_search(&s.labels[tier - 1]).is_err() {
            return Err(Error::Data(format!(
                "grid site {} carries tier-{tier} label {} unknown to the fit",
                s.id,
                s.labels[tier - 1]
            )));
        }
        if !s.elevation_km.is_finite() {
            return Err(Error::Data(format!("grid site {} has a non-finite elevation", s.id)));
        }
    }
    Ok(())
}

/// Index of the training site spatially coincident with `site`, if any.
fn coincident_site(data: &Dataset, site: &Site) -> Option<usize> {
    data.sites.iter().position(|s| {
        (s.easting_km - site.easting_km).abs() < 1e-9
            && (s.northing_km - site.northing_km).abs() < 1e-9
    })
}

fn lambda_prior_draw(
    archive: &PosteriorArchive,
    d: usize,
    rng: &mut impl Rng,
) -> Result<[[f64; MONTHS]; N_RESPONSES]> {
    let p = &archive.draws[d];
    let mut out = [[0.0; MONTHS]; N_RESPONSES];
    for i in 0..N_RESPONSES {
        let k = cyclical_corr_matrix(p.cyclical[i].phi_cy, archive.config.period)
            * p.cyclical[i].sigma2_cy;
        let chol = k
            .cholesky()
            .ok_or_else(|| Error::Numerical("cyclical covariance is not SPD".into()))?;
        let z = SVector::<f64, MONTHS>::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let v = chol.l() * z;
        for mo in 0..MONTHS {
            out[i][mo] = v[mo];
        }
    }
    Ok(out)
}

/// Sequential posterior predictive sampling of grid series.
pub fn predict_series(
    task: &PredictionTask,
    archive: &PosteriorArchive,
    data: &Dataset,
) -> Result<PredictionResult> {
    check_task(task, archive, data)?;
    let draws = draw_indices(archive.n_draws(), task.draw_subsample);
    let coregs: Result<Vec<Coregionalization>> =
        archive.draws.iter().map(|p| sym_sqrt(&p.sigma)).collect();
    let coregs = coregs?;
    let tier = archive.config.tier;
    let m = archive.config.m;
    let w = archive.config.space_weight;
    let period = archive.config.period;
    let seed = archive.config.seed;
    let n_obs = data.n_points();

    let per_site: Result<Vec<Vec<PointPrediction>>> = task
        .grid_sites
        .par_iter()
        .enumerate()
        .map(|(g, site)| {
            let lab = archive
                .labels
                .binary_search(&site.labels[tier - 1])
                .expect("validated in check_task");
            let coincident = coincident_site(data, site);
            // Grid point-months for this site.
            let grid_points: Vec<SpaceTimePoint> = (0..task.n_months)
                .map(|k| {
                    let year = task.start_year + (k / MONTHS) as i32;
                    let month = (k % MONTHS) as u32 + 1;
                    SpaceTimePoint {
                        site_id: site.id,
                        easting: site.easting_km,
                        northing: site.northing_km,
                        time: month_to_time(year, month),
                        elevation: site.elevation_km,
                    }
                })
                .collect();
            // Neighbor sets are geometric: m nearest among observed points
            // (any time) plus this site's earlier grid months.
            let neighbor_sets: Vec<Vec<usize>> = grid_points
                .iter()
                .enumerate()
                .map(|(k, gp)| {
                    let mut cand: Vec<(f64, usize)> = (0..n_obs)
                        .map(|q| {
                            let l = lag(gp, &data.points[q], period);
                            (combined_distance_unchecked(l.h_s, l.h_t, w), q)
                        })
                        .chain((0..k).map(|j| {
                            let l = lag(gp, &grid_points[j], period);
                            (combined_distance_unchecked(l.h_s, l.h_t, w), n_obs + j)
                        }))
                        .collect();
                    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    let mut set: Vec<usize> = cand.into_iter().take(m).map(|(_, q)| q).collect();
                    set.sort_unstable();
                    set
                })
                .collect();
            // Per-draw sequential sampling.
            let mut samples: Vec<[Vec<f64>; N_RESPONSES]> = (0..task.n_months)
                .map(|_| std::array::from_fn(|_| Vec::with_capacity(draws.len())))
                .collect();
            let mut phys: Vec<[Vec<f64>; N_RESPONSES]> = (0..task.n_months)
                .map(|_| std::array::from_fn(|_| Vec::with_capacity(draws.len())))
                .collect();
            for &d in &draws {
                let mut rng = substream(seed, Stream::Predict, &[g as u64, d as u64]);
                let lambda = match coincident {
                    Some(s) => archive.latent[d].lambda[s],
                    None => lambda_prior_draw(archive, d, &mut rng)?,
                };
                let p = &archive.draws[d];
                let mut omega0: Vec<Vector3<f64>> = Vec::with_capacity(task.n_months);
                for k in 0..task.n_months {
                    let nbrs = &neighbor_sets[k];
                    let nbr_pts: Vec<SpaceTimePoint> = nbrs
                        .iter()
                        .map(|&q| if q < n_obs { data.points[q] } else { grid_points[q - n_obs] })
                        .collect();
                    let mut vals = DVector::zeros(3 * nbrs.len());
                    for (j, &q) in nbrs.iter().enumerate() {
                        let v =
                            if q < n_obs { archive.latent[d].omega[q] } else { omega0[q - n_obs] };
                        vals[3 * j] = v[0];
                        vals[3 * j + 1] = v[1];
                        vals[3 * j + 2] = v[2];
                    }
                    let wts =
                        kriging_weights(&grid_points[k], &nbr_pts, &coregs[d], &p.thetas, period)?;
                    let om = conditional_draw(&wts, &vals, &mut rng);
                    omega0.push(om);
                    let mo = k % MONTHS;
                    let mut y = Vector3::zeros();
                    for i in 0..N_RESPONSES {
                        let mean = p.beta[lab][i][0] + p.beta[lab][i][1] * site.elevation_km;
                        let eps = p.sigma2_eps[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
                        y[i] = mean + om[i] + lambda[i][mo] + eps;
                    }
                    let (rain, tmin, tmax) = decode_latent(&y, &archive.transform);
                    for i in 0..N_RESPONSES {
                        samples[k][i].push(y[i]);
                    }
                    phys[k][0].push(rain);
                    phys[k][1].push(tmin);
                    phys[k][2].push(tmax);
                }
            }
            let out: Vec<PointPrediction> = (0..task.n_months)
                .map(|k| {
                    let year = task.start_year + (k / MONTHS) as i32;
                    let month = (k % MONTHS) as u32 + 1;
                    PointPrediction {
                        site_id: site.id,
                        easting_km: site.easting_km,
                        northing_km: site.northing_km,
                        year,
                        month,
                        model: std::array::from_fn(|i| summarize(&mut samples[k][i].clone())),
                        physical: std::array::from_fn(|i| summarize(&mut phys[k][i].clone())),
                    }
                })
                .collect();
            Ok(out)
        })
        .collect();
    let mut points = Vec::new();
    for site_rows in per_site? {
        points.extend(site_rows);
    }
    Ok(PredictionResult { points })
}

/// Posterior draws of the monthly cyclical component per grid site. At a
/// site coincident with a station these are exactly the station's archived
/// draws; elsewhere they are prior draws coherent with [`predict_series`]
/// (same substream).
pub fn predict_seasonal(
    task: &PredictionTask,
    archive: &PosteriorArchive,
    data: &Dataset,
) -> Result<Vec<SeasonalSummary>> {
    check_task(task, archive, data)?;
    let draws = draw_indices(archive.n_draws(), task.draw_subsample);
    let seed = archive.config.seed;
    let per_site: Result<Vec<Vec<SeasonalSummary>>> = task
        .grid_sites
        .par_iter()
        .enumerate()
        .map(|(g, site)| {
            let coincident = coincident_site(data, site);
            let mut samples: Vec<[Vec<f64>; N_RESPONSES]> = (0..MONTHS)
                .map(|_| std::array::from_fn(|_| Vec::with_capacity(draws.len())))
                .collect();
            for &d in &draws {
                let lambda = match coincident {
                    Some(s) => archive.latent[d].lambda[s],
                    None => {
                        let mut rng = substream(seed, Stream::Predict, &[g as u64, d as u64]);
                        lambda_prior_draw(archive, d, &mut rng)?
                    }
                };
                for mo in 0..MONTHS {
                    for i in 0..N_RESPONSES {
                        samples[mo][i].push(lambda[i][mo]);
                    }
                }
            }
            Ok((0..MONTHS)
                .map(|mo| SeasonalSummary {
                    site_id: site.id,
                    month: mo as u32 + 1,
                    stats: std::array::from_fn(|i| summarize(&mut samples[mo][i].clone())),
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for site_rows in per_site? {
        rows.extend(site_rows);
    }
    Ok(rows)
}

/// Stratified holdout: blanks a fraction of observed records per ecoregion
/// while keeping the station layout (and hence the neighbor geometry)
/// intact. Ecoregions with a single station contribute nothing; every
/// selected ecoregion keeps at least one untouched station.
#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub train: Dataset,
    /// The held-out original records.
    pub validation: Vec<StationRecord>,
    /// Tier labels skipped for having a single station.
    pub excluded_labels: Vec<u32>,
}

pub fn holdout_split(
    data: &Dataset,
    fraction: f64,
    tier: usize,
    seed: u64,
) -> Result<HoldoutSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("holdout fraction must lie in (0, 1), got {fraction}")));
    }
    if !(1..=5).contains(&tier) {
        return Err(Error::Config(format!("tier must be in 1..=5, got {tier}")));
    }
    let mut rng = substream(seed, Stream::Split, &[tier as u64]);
    // Group site indices per tier label.
    let mut groups: HashMap<u32, Vec<usize>> = HashMap::new();
    for (s, site) in data.sites.iter().enumerate() {
        groups.entry(site.labels[tier - 1]).or_default().push(s);
    }
    let mut labels: Vec<u32> = groups.keys().copied().collect();
    labels.sort_unstable();
    let mut records = data.records.clone();
    let mut validation = Vec::new();
    let mut excluded = Vec::new();
    for lab in labels {
        let sites = &groups[&lab];
        if sites.len() < 2 {
            excluded.push(lab);
            continue;
        }
        // One station stays fully in training.
        let protected = sites[rng.random_range(0..sites.len())];
        let mut candidates: Vec<usize> = Vec::new();
        let mut observed = 0usize;
        for (p, r) in records.iter().enumerate() {
            if data.site_of_point[p] == protected || !sites.contains(&data.site_of_point[p]) {
                if sites.contains(&data.site_of_point[p]) && has_observation(r) {
                    observed += 1;
                }
                continue;
            }
            if has_observation(r) {
                observed += 1;
                candidates.push(p);
            }
        }
        let take = ((fraction * observed as f64).round() as usize).min(candidates.len());
        // Fisher-Yates prefix selection for a deterministic subset.
        for j in 0..take {
            let pick = rng.random_range(j..candidates.len());
            candidates.swap(j, pick);
        }
        for &p in &candidates[..take] {
            validation.push(records[p]);
            records[p].rain_mm = None;
            records[p].tmin_c = None;
            records[p].tmax_c = None;
        }
    }
    if validation.is_empty() {
        return Err(Error::Data("holdout selected no validation records".into()));
    }
    let train = Dataset::from_records(data.sites.clone(), records)?;
    validation.sort_by_key(|r| (r.site_id, r.year, r.month));
    Ok(HoldoutSplit { train, validation, excluded_labels: excluded })
}

fn has_observation(r: &StationRecord) -> bool {
    r.rain_mm.is_some() || r.tmin_c.is_some() || r.tmax_c.is_some()
}

/// Per-response holdout error in physical units.
#[derive(Debug, Clone, Copy)]
pub struct ValidationRow {
    pub response: &'static str,
    pub n: usize,
    pub rmse: f64,
    /// Range of the held-out truth, for the 100 * RMSE / range column.
    pub range: f64,
    pub relative: f64,
}

/// RMSE of the posterior predictive mean at held-out records. The archive
/// must come from a fit of `train`, whose latent draws cover the blanked
/// points; predictive draws add the nugget before decoding.
pub fn validate(
    archive: &PosteriorArchive,
    train: &Dataset,
    validation: &[StationRecord],
) -> Result<[ValidationRow; N_RESPONSES]> {
    if validation.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    if archive.latent.is_empty() {
        return Err(Error::ArchiveMismatch(
            "archive holds no latent draws; refit with store_latent".into(),
        ));
    }
    let mut index: HashMap<(u32, i32, u32), usize> = HashMap::new();
    for (p, r) in train.records.iter().enumerate() {
        index.insert((r.site_id, r.year, r.month), p);
    }
    let labels = &archive.labels;
    let tier = archive.config.tier;
    let seed = archive.config.seed;
    let names = ["rain_mm", "tmin_c", "tmax_c"];
    let mut sq = [0.0; N_RESPONSES];
    let mut n = [0usize; N_RESPONSES];
    let mut lo = [f64::INFINITY; N_RESPONSES];
    let mut hi = [f64::NEG_INFINITY; N_RESPONSES];
    for (v_idx, rec) in validation.iter().enumerate() {
        let &p = index.get(&(rec.site_id, rec.year, rec.month)).ok_or_else(|| {
            Error::Data(format!(
                "validation record (site {}, {}-{:02}) not present in the training design",
                rec.site_id, rec.year, rec.month
            ))
        })?;
        let site = train.site_of_point[p];
        let lab = labels
            .binary_search(&train.sites[site].labels[tier - 1])
            .map_err(|_| Error::ArchiveMismatch("validation label unknown to the fit".into()))?;
        let elev = train.points[p].elevation;
        let mo = (rec.month - 1) as usize;
        let mut rng = substream(seed, Stream::Predict, &[u64::MAX, v_idx as u64]);
        let k = archive.n_draws() as f64;
        let mut acc = [0.0; N_RESPONSES];
        for (d, params) in archive.draws.iter().enumerate() {
            let mut y = Vector3::zeros();
            for i in 0..N_RESPONSES {
                let mean = params.beta[lab][i][0] + params.beta[lab][i][1] * elev;
                let eps = params.sigma2_eps[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
                y[i] = mean
                    + archive.latent[d].omega[p][i]
                    + archive.latent[d].lambda[site][i][mo]
                    + eps;
            }
            let (rain, tmin, tmax) = decode_latent(&y, &archive.transform);
            acc[0] += rain / k;
            acc[1] += tmin / k;
            acc[2] += tmax / k;
        }
        let truth = [rec.rain_mm, rec.tmin_c, rec.tmax_c];
        for i in 0..N_RESPONSES {
            if let Some(t) = truth[i] {
                sq[i] += (acc[i] - t) * (acc[i] - t);
                n[i] += 1;
                lo[i] = lo[i].min(t);
                hi[i] = hi[i].max(t);
            }
        }
    }
    Ok(std::array::from_fn(|i| {
        let rmse = if n[i] > 0 { (sq[i] / n[i] as f64).sqrt() } else { f64::NAN };
        let range = if n[i] > 0 { hi[i] - lo[i] } else { f64::NAN };
        ValidationRow {
            response: names[i],
            n: n[i],
            rmse,
            range,
            relative: if range > 0.0 { 100.0 * rmse / range } else { f64::NAN },
        }
    }))
}

/// `grid_predictions.csv`: physical rows (mm, deg_c) followed by
/// model-scale rows (unit `model`) per point-month.
pub fn write_grid_predictions_csv<W: Write>(w: W, result: &PredictionResult) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "site", "easting", "northing", "month", "year", "response", "mean", "sd", "q025", "q50",
        "q975", "unit",
    ])?;
    let phys = [("rain_mm", "mm"), ("tmin_c", "deg_c"), ("tmax_c", "deg_c")];
    let model = [("y1", "model"), ("y2", "model"), ("y3", "model")];
    for p in &result.points {
        for (i, &(name, unit)) in phys.iter().enumerate() {
            write_stats_row(&mut wtr, p, name, unit, &p.physical[i])?;
        }
        for (i, &(name, unit)) in model.iter().enumerate() {
            write_stats_row(&mut wtr, p, name, unit, &p.model[i])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn write_stats_row<W: Write>(
    wtr: &mut csv::Writer<W>,
    p: &PointPrediction,
    name: &str,
    unit: &str,
    s: &SummaryStats,
) -> Result<()> {
    wtr.write_record([
        p.site_id.to_string(),
        format!("{:?}", p.easting_km),
        format!("{:?}", p.northing_km),
        p.month.to_string(),
        p.year.to_string(),
        name.to_string(),
        format!("{:?}", s.mean),
        format!("{:?}", s.sd),
        format!("{:?}", s.q025),
        format!("{:?}", s.q50),
        format!("{:?}", s.q975),
        unit.to_string(),
    ])?;
    Ok(())
}

/// `seasonal_effects.csv`: one row per (site, calendar month, response).
pub fn write_seasonal_csv<W: Write>(w: W, rows: &[SeasonalSummary]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["site", "month", "response", "mean", "sd", "q025", "q975"])?;
    let names = ["y1", "y2", "y3"];
    for r in rows {
        for i in 0..N_RESPONSES {
            wtr.write_record([
                r.site_id.to_string(),
                r.month.to_string(),
                names[i].to_string(),
                format!("{:?}", r.stats[i].mean),
                format!("{:?}", r.stats[i].sd),
                format!("{:?}", r.stats[i].q025),
                format!("{:?}", r.stats[i].q975),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
