//! On-disk posterior archive: a directory holding `manifest.json`
//! (configuration, priors, transform, labels, acceptance rates),
//! `draws.csv` (one row per kept draw of the continuous parameters plus
//! the observed-data log-likelihood) and `latent.bin` (per-draw latent
//! fields, little-endian f64, needed by prediction and DIC).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::covariance::{CyclicalParams, GneitingParams};
use crate::model::{TransformSpec, MONTHS};
use crate::{Error, Result, N_RESPONSES};

use super::{ParameterSet, Priors, SamplerConfig};

const LATENT_MAGIC: &[u8; 8] = b"CLIMGPL1";

/// One kept draw of the latent fields.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDraw {
    /// Space-time process per point.
    pub omega: Vec<Vector3<f64>>,
    /// Cyclical effects per site: lambda[site][resp][month].
    pub lambda: Vec<[[f64; MONTHS]; N_RESPONSES]>,
    /// Latent responses per point (augmented entries included), so the
    /// censoring invariant is auditable on archived states.
    pub y: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: SamplerConfig,
    priors: Priors,
    transform: TransformSpec,
    labels: Vec<u32>,
    n_sites: usize,
    n_points: usize,
    n_draws: usize,
    acceptance: Vec<(String, f64)>,
}

/// Kept posterior draws plus everything needed to reuse them.
#[derive(Debug, Clone)]
pub struct PosteriorArchive {
    pub config: SamplerConfig,
    pub priors: Priors,
    pub transform: TransformSpec,
    /// Sorted distinct tier labels indexing the beta rows.
    pub labels: Vec<u32>,
    pub n_sites: usize,
    pub n_points: usize,
    pub draws: Vec<ParameterSet>,
    /// Observed-data log-likelihood per draw.
    pub logliks: Vec<f64>,
    /// Latent fields per draw; empty when `store_latent` was off.
    pub latent: Vec<LatentDraw>,
    /// Final acceptance rates of the Metropolis blocks.
    pub acceptance: Vec<(String, f64)>,
}

impl PosteriorArchive {
    pub fn new(
        config: SamplerConfig,
        priors: Priors,
        transform: TransformSpec,
        labels: Vec<u32>,
        n_sites: usize,
        n_points: usize,
    ) -> PosteriorArchive {
        PosteriorArchive {
            config,
            priors,
            transform,
            labels,
            n_sites,
            n_points,
            draws: Vec::new(),
            logliks: Vec::new(),
            latent: Vec::new(),
            acceptance: Vec::new(),
        }
    }

    pub fn push(&mut self, params: ParameterSet, loglik: f64, latent: Option<LatentDraw>) {
        self.draws.push(params);
        self.logliks.push(loglik);
        if let Some(l) = latent {
            debug_assert_eq!(l.omega.len(), self.n_points);
            debug_assert_eq!(l.lambda.len(), self.n_sites);
            self.latent.push(l);
        }
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    /// Posterior mean of the latent fields (for DIC's plug-in deviance).
    pub fn latent_means(&self) -> Result<LatentDraw> {
        if self.latent.is_empty() {
            return Err(Error::ArchiveMismatch(
                "archive holds no latent draws; refit with store_latent".into(),
            ));
        }
        let k = self.latent.len() as f64;
        let mut omega = vec![Vector3::zeros(); self.n_points];
        let mut lambda = vec![[[0.0; MONTHS]; N_RESPONSES]; self.n_sites];
        let mut y = vec![Vector3::zeros(); self.n_points];
        for d in &self.latent {
            for (acc, v) in omega.iter_mut().zip(d.omega.iter()) {
                *acc += v / k;
            }
            for (acc, l) in lambda.iter_mut().zip(d.lambda.iter()) {
                for i in 0..N_RESPONSES {
                    for mo in 0..MONTHS {
                        acc[i][mo] += l[i][mo] / k;
                    }
                }
            }
            for (acc, v) in y.iter_mut().zip(d.y.iter()) {
                *acc += v / k;
            }
        }
        Ok(LatentDraw { omega, lambda, y })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            config: self.config.clone(),
            priors: self.priors.clone(),
            transform: self.transform,
            labels: self.labels.clone(),
            n_sites: self.n_sites,
            n_points: self.n_points,
            n_draws: self.draws.len(),
            acceptance: self.acceptance.clone(),
        };
        let f = File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &manifest)?;
        self.write_draws_csv(&dir.join("draws.csv"))?;
        if !self.latent.is_empty() {
            self.write_latent_bin(&dir.join("latent.bin"))?;
        }
        Ok(())
    }

    fn write_draws_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let mut header = vec!["draw".to_string(), "loglik".to_string()];
        for i in 1..=N_RESPONSES {
            for name in ["phi_sp", "phi_ti", "eta", "sigma2_cy", "phi_cy", "sigma2_eps"] {
                header.push(format!("{name}_{i}"));
            }
        }
        for (r, c) in SIGMA_LOWER {
            header.push(format!("sigma_{}{}", r + 1, c + 1));
        }
        for lab in &self.labels {
            for i in 1..=N_RESPONSES {
                header.push(format!("beta0_{lab}_{i}"));
                header.push(format!("beta1_{lab}_{i}"));
            }
        }
        w.write_record(&header)?;
        for (k, (p, ll)) in self.draws.iter().zip(self.logliks.iter()).enumerate() {
            let mut row = vec![k.to_string(), fmt(*ll)];
            for i in 0..N_RESPONSES {
                row.push(fmt(p.thetas[i].phi_sp));
                row.push(fmt(p.thetas[i].phi_ti));
                row.push(fmt(p.thetas[i].eta));
                row.push(fmt(p.cyclical[i].sigma2_cy));
                row.push(fmt(p.cyclical[i].phi_cy));
                row.push(fmt(p.sigma2_eps[i]));
            }
            for (r, c) in SIGMA_LOWER {
                row.push(fmt(p.sigma[(r, c)]));
            }
            for b in &p.beta {
                for i in 0..N_RESPONSES {
                    row.push(fmt(b[i][0]));
                    row.push(fmt(b[i][1]));
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn write_latent_bin(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(LATENT_MAGIC)?;
        for v in [self.latent.len(), self.n_points, self.n_sites] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for d in &self.latent {
            for o in &d.omega {
                for i in 0..N_RESPONSES {
                    w.write_all(&o[i].to_le_bytes())?;
                }
            }
            for l in &d.lambda {
                for i in 0..N_RESPONSES {
                    for mo in 0..MONTHS {
                        w.write_all(&l[i][mo].to_le_bytes())?;
                    }
                }
            }
            for y in &d.y {
                for i in 0..N_RESPONSES {
                    w.write_all(&y[i].to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<PosteriorArchive> {
        let f = File::open(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_reader(BufReader::new(f))?;
        let mut archive = PosteriorArchive::new(
            manifest.config,
            manifest.priors,
            manifest.transform,
            manifest.labels,
            manifest.n_sites,
            manifest.n_points,
        );
        archive.acceptance = manifest.acceptance;
        archive.read_draws_csv(&dir.join("draws.csv"))?;
        if archive.draws.len() != manifest.n_draws {
            return Err(Error::ArchiveMismatch(format!(
                "manifest lists {} draws, draws.csv holds {}",
                manifest.n_draws,
                archive.draws.len()
            )));
        }
        let latent_path = dir.join("latent.bin");
        if latent_path.exists() {
            archive.read_latent_bin(&latent_path)?;
        }
        Ok(archive)
    }

    fn read_draws_csv(&mut self, path: &Path) -> Result<()> {
        let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let n_labels = self.labels.len();
        let expected = 2 + 6 * N_RESPONSES + 6 + 6 * n_labels;
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != expected {
                return Err(Error::ArchiveMismatch(format!(
                    "draws.csv row has {} fields, expected {expected}",
                    rec.len()
                )));
            }
            let field = |k: usize| -> Result<f64> {
                rec[k].parse().map_err(|_| {
                    Error::ArchiveMismatch(format!("bad numeric field '{}' in draws.csv", &rec[k]))
                })
            };
            self.logliks.push(field(1)?);
            let mut thetas = [GneitingParams { phi_sp: 1.0, phi_ti: 1.0, eta: 0.5 }; N_RESPONSES];
            let mut cyclical = [CyclicalParams { sigma2_cy: 1.0, phi_cy: 1.0 }; N_RESPONSES];
            let mut sigma2_eps = [0.0; N_RESPONSES];
            for i in 0..N_RESPONSES {
                let base = 2 + 6 * i;
                thetas[i] = GneitingParams {
                    phi_sp: field(base)?,
                    phi_ti: field(base + 1)?,
                    eta: field(base + 2)?,
                };
                cyclical[i] =
                    CyclicalParams { sigma2_cy: field(base + 3)?, phi_cy: field(base + 4)? };
                sigma2_eps[i] = field(base + 5)?;
            }
            let sbase = 2 + 6 * N_RESPONSES;
            let mut sigma = Matrix3::zeros();
            for (k, (row, col)) in SIGMA_LOWER.iter().enumerate() {
                let v = field(sbase + k)?;
                sigma[(*row, *col)] = v;
                sigma[(*col, *row)] = v;
            }
            let bbase = sbase + 6;
            let mut beta = Vec::with_capacity(n_labels);
            for l in 0..n_labels {
                let mut row = [[0.0; 2]; N_RESPONSES];
                for i in 0..N_RESPONSES {
                    row[i][0] = field(bbase + 6 * l + 2 * i)?;
                    row[i][1] = field(bbase + 6 * l + 2 * i + 1)?;
                }
                beta.push(row);
            }
            self.draws.push(ParameterSet { thetas, sigma, cyclical, sigma2_eps, beta });
        }
        Ok(())
    }

    fn read_latent_bin(&mut self, path: &Path) -> Result<()> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != LATENT_MAGIC {
            return Err(Error::ArchiveMismatch("latent.bin has a wrong magic header".into()));
        }
        let mut u = [0u8; 8];
        let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
            r.read_exact(&mut u)?;
            Ok(u64::from_le_bytes(u))
        };
        let n_draws = read_u64(&mut r)? as usize;
        let n_points = read_u64(&mut r)? as usize;
        let n_sites = read_u64(&mut r)? as usize;
        if n_points != self.n_points || n_sites != self.n_sites {
            return Err(Error::ArchiveMismatch(format!(
                "latent.bin dimensions ({n_points} points, {n_sites} sites) do not match the manifest"
            )));
        }
        let mut buf = vec![0u8; 8 * (6 * n_points + n_sites * N_RESPONSES * MONTHS)];
        for _ in 0..n_draws {
            r.read_exact(&mut buf)?;
            let mut vals = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
            let omega: Vec<Vector3<f64>> = (0..n_points)
                .map(|_| {
                    Vector3::new(
                        vals.next().expect("sized"),
                        vals.next().expect("sized"),
                        vals.next().expect("sized"),
                    )
                })
                .collect();
            let lambda: Vec<[[f64; MONTHS]; N_RESPONSES]> = (0..n_sites)
                .map(|_| {
                    let mut l = [[0.0; MONTHS]; N_RESPONSES];
                    for i in 0..N_RESPONSES {
                        for mo in 0..MONTHS {
                            l[i][mo] = vals.next().expect("sized");
                        }
                    }
                    l
                })
                .collect();
            let y: Vec<Vector3<f64>> = (0..n_points)
                .map(|_| {
                    Vector3::new(
                        vals.next().expect("sized"),
                        vals.next().expect("sized"),
                        vals.next().expect("sized"),
                    )
                })
                .collect();
            self.latent.push(LatentDraw { omega, lambda, y });
        }
        Ok(())
    }
}

/// Lower-triangle order of Sigma in draws.csv.
const SIGMA_LOWER: [(usize, usize); 6] = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];

fn fmt(v: f64) -> String {
    // Round-trip exact representation so save -> load is lossless.
    let mut s = format!("{v:?}");
    if s == "NaN" {
        s = "nan".into();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_archive() -> PosteriorArchive {
        let config = SamplerConfig { iterations: 10, burn_in: 5, thin: 1, ..Default::default() };
        let transform = TransformSpec {
            rain_scale: 2.0,
            tmin_center: 1.0,
            tmin_scale: 3.0,
            range_center: 0.0,
            range_scale: 4.0,
        };
        let mut a = PosteriorArchive::new(config, Priors::default(), transform, vec![3, 7], 2, 4);
        for k in 0..3 {
            let mut p = ParameterSet::default_init(2);
            p.thetas[0].phi_sp = 0.1 + 0.01 * k as f64;
            p.sigma[(0, 1)] = 0.2;
            p.sigma[(1, 0)] = 0.2;
            p.beta[1][2][1] = -0.5 + k as f64;
            let latent = LatentDraw {
                omega: (0..4).map(|p_| Vector3::new(k as f64, p_ as f64, 0.25)).collect(),
                lambda: vec![[[0.125 * k as f64; MONTHS]; N_RESPONSES]; 2],
                y: (0..4).map(|p_| Vector3::new(-0.5, p_ as f64, k as f64)).collect(),
            };
            a.push(p, -10.0 - k as f64, Some(latent));
        }
        a.acceptance = vec![("sigma".into(), 0.31)];
        a
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let a = small_archive();
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let b = PosteriorArchive::load(dir.path()).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.logliks, b.logliks);
        assert_eq!(a.latent, b.latent);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.acceptance, b.acceptance);
        assert_eq!(a.transform, b.transform);
    }

    #[test]
    fn latent_means_are_exact_averages() {
        let a = small_archive();
        let m = a.latent_means().unwrap();
        // omega component 0 averages k over k = 0, 1, 2.
        assert_eq!(m.omega[0][0], 1.0);
        assert_eq!(m.omega[2][1], 2.0);
        assert_eq!(m.lambda[0][1][5], 0.125);
    }

    #[test]
    fn missing_latent_is_reported() {
        let mut a = small_archive();
        a.latent.clear();
        assert!(a.latent_means().is_err());
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let b = PosteriorArchive::load(dir.path()).unwrap();
        assert!(b.latent.is_empty());
    }
}
