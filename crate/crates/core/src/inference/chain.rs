//! The blocked MCMC sampler. One iteration cycles, in fixed order:
//! augmentation of missing/censored responses, the regression
//! coefficients, the cyclical effects, the latent field, the nugget
//! variances, and the covariance parameters (Metropolis).
//!
//! Reproducibility contract: every draw flows from (seed, iteration,
//! block, unit) substreams, so archives are a pure function of
//! (data, config, priors, seed) independent of thread count.

use nalgebra::{DVector, Matrix2, Matrix3, SMatrix, Vector2, Vector3};
use rand::Rng;
use rayon::prelude::*;

use crate::covariance::{sym_sqrt, Coregionalization, CyclicalParams, GneitingParams};
use crate::data::Dataset;
use crate::dist::{sample_normal, sample_normal_below};
use crate::model::{loglik_point, LatentState, ObsFlag, TransformSpec, MONTHS};
use crate::nngp::{
    build_graph, build_weight_cache, color_component, scalar_weight_set, whiten_component,
    NeighborGraph, WeightSet,
};
use crate::rng::{substream, Stream};
use crate::{Error, Result, N_RESPONSES};

use super::archive::{LatentDraw, PosteriorArchive};
use super::updates::*;
use super::{ParameterSet, Priors, SamplerConfig};

// Block ids for substream derivation.
const BLK_AUGMENT: u64 = 1;
const BLK_BETA: u64 = 2;
const BLK_LAMBDA: u64 = 3;
const BLK_OMEGA: u64 = 4;
const BLK_NUGGET: u64 = 5;
const BLK_COV: u64 = 6;
const BLK_COV_NC: u64 = 7;

pub(super) struct Chain<'a> {
    data: &'a Dataset,
    config: SamplerConfig,
    priors: Priors,
    pub transform: TransformSpec,
    /// Sorted distinct labels of the chosen tier.
    pub labels: Vec<u32>,
    label_of_site: Vec<usize>,
    month_of_point: Vec<usize>,
    points_of_site: Vec<Vec<usize>>,
    pub graph: NeighborGraph,
    pub weights: WeightSet,
    pub coreg: Coregionalization,
    pub params: ParameterSet,
    pub state: LatentState,
    /// Per-point regression mean, refreshed after every beta update.
    mean: Vec<Vector3<f64>>,
    gneiting_scales: [AdaptiveScale; N_RESPONSES],
    gneiting_nc_scales: [AdaptiveScale; N_RESPONSES],
    sigma_scale: AdaptiveScale,
    cyclical_scales: [AdaptiveScale; N_RESPONSES],
    sigma_log_chol: [f64; 6],
}

impl<'a> Chain<'a> {
    pub fn new(data: &'a Dataset, config: &SamplerConfig, priors: &Priors) -> Result<Chain<'a>> {
        config.validate()?;
        priors.validate()?;
        if ![10, 15, 20].contains(&config.m) {
            eprintln!("warning: m = {} is outside the studied set {{10, 15, 20}}", config.m);
        }
        let transform = TransformSpec::from_dataset(data)?;
        let labels = data.tier_labels(config.tier);
        let label_of_site: Vec<usize> = data
            .sites
            .iter()
            .map(|s| {
                labels
                    .binary_search(&s.labels[config.tier - 1])
                    .expect("site label is present by construction")
            })
            .collect();
        let month_of_point: Vec<usize> =
            data.year_month.iter().map(|&(_, m)| (m - 1) as usize).collect();
        let mut points_of_site = vec![Vec::new(); data.sites.len()];
        for (p, &s) in data.site_of_point.iter().enumerate() {
            points_of_site[s].push(p);
        }
        let graph = build_graph(&data.points, config.m, config.space_weight, config.period)?;
        let params =
            config.init.clone().unwrap_or_else(|| ParameterSet::default_init(labels.len()));
        if params.beta.len() != labels.len() {
            return Err(Error::Config(format!(
                "initial beta has {} label rows but the tier has {}",
                params.beta.len(),
                labels.len()
            )));
        }
        let coreg = sym_sqrt(&params.sigma)?;
        let weights = build_weight_cache(&graph, &coreg, &params.thetas)?;
        let mut state = LatentState::init(data, &transform, labels.len())?;
        state.beta = params.beta.clone();
        state.sigma2_eps = params.sigma2_eps;
        let sigma_log_chol = sigma_to_log_chol(&params.sigma)?;
        let mut chain = Chain {
            data,
            config: config.clone(),
            priors: priors.clone(),
            transform,
            labels,
            label_of_site,
            month_of_point,
            points_of_site,
            graph,
            weights,
            coreg,
            params,
            state,
            mean: Vec::new(),
            gneiting_scales: std::array::from_fn(|_| AdaptiveScale::new(0.1)),
            gneiting_nc_scales: std::array::from_fn(|_| AdaptiveScale::new(0.3)),
            sigma_scale: AdaptiveScale::new(0.05),
            cyclical_scales: std::array::from_fn(|_| AdaptiveScale::new(0.15)),
            sigma_log_chol,
        };
        chain.refresh_means();
        if config.init.is_none() {
            chain.initialize_from_data()?;
        }
        Ok(chain)
    }

    /// Seed the chain near the data: least-squares beta, the residual field
    /// as the starting omega, and the empirical residual covariance as
    /// Sigma. Starting the field at the residuals lets the sweep shrink
    /// toward the posterior, which mixes far better than growing a zero
    /// field out of an initially tight prior.
    fn initialize_from_data(&mut self) -> Result<()> {
        for lab in 0..self.labels.len() {
            for i in 0..N_RESPONSES {
                let (mut s0, mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for p in 0..self.data.n_points() {
                    if self.label_of_site[self.data.site_of_point[p]] != lab
                        || self.state.flags[p][i] != ObsFlag::Observed
                    {
                        continue;
                    }
                    let x = self.data.points[p].elevation;
                    let y = self.state.y[p][i];
                    s0 += 1.0;
                    sx += x;
                    sxx += x * x;
                    sy += y;
                    sxy += x * y;
                }
                if s0 < 2.0 {
                    continue;
                }
                let det = s0 * sxx - sx * sx;
                self.params.beta[lab][i] = if det.abs() > 1e-9 * (s0 * sxx).max(1.0) {
                    [(sxx * sy - sx * sxy) / det, (s0 * sxy - sx * sy) / det]
                } else {
                    [sy / s0, 0.0]
                };
            }
        }
        self.state.beta = self.params.beta.clone();
        self.refresh_means();

        // Empirical annual cycle per site: monthly means of the observed
        // residuals seed lambda so the cycle does not get absorbed into the
        // space-time field.
        for (s, pts) in self.points_of_site.iter().enumerate() {
            for i in 0..N_RESPONSES {
                let mut sums = [0.0; MONTHS];
                let mut counts = [0.0; MONTHS];
                for &p in pts {
                    if self.state.flags[p][i] == ObsFlag::Observed {
                        let mo = self.month_of_point[p];
                        sums[mo] += self.state.y[p][i] - self.mean[p][i];
                        counts[mo] += 1.0;
                    }
                }
                for mo in 0..MONTHS {
                    if counts[mo] > 0.0 {
                        self.state.lambda[s][i][mo] = sums[mo] / counts[mo];
                    }
                }
            }
        }

        let mut count = 0.0;
        let mut sum_r = Vector3::zeros();
        let mut sum_sq = Matrix3::zeros();
        for p in 0..self.data.n_points() {
            let lam = self.lambda_at(p);
            let mut r = Vector3::zeros();
            let mut all_observed = true;
            for i in 0..N_RESPONSES {
                if self.state.flags[p][i] == ObsFlag::Observed {
                    r[i] = self.state.y[p][i] - self.mean[p][i] - lam[i];
                } else {
                    all_observed = false;
                }
                self.state.omega[p][i] = r[i];
            }
            if all_observed {
                count += 1.0;
                sum_r += r;
                sum_sq += r * r.transpose();
            }
        }
        if count >= 10.0 {
            let mu = sum_r / count;
            let cov = sum_sq / count - mu * mu.transpose();
            let sigma = 0.9 * cov + 0.1 * Matrix3::identity();
            if let Ok(coreg) = sym_sqrt(&sigma) {
                self.params.sigma = sigma;
                self.sigma_log_chol = sigma_to_log_chol(&sigma)?;
                self.coreg = coreg;
                self.weights = build_weight_cache(&self.graph, &self.coreg, &self.params.thetas)?;
            }
            for i in 0..N_RESPONSES {
                self.params.sigma2_eps[i] = (0.1 * self.params.sigma[(i, i)]).max(1e-3);
            }
            self.state.sigma2_eps = self.params.sigma2_eps;
        }
        Ok(())
    }

    fn refresh_means(&mut self) {
        let n = self.data.n_points();
        self.mean = (0..n)
            .map(|p| {
                let lab = self.label_of_site[self.data.site_of_point[p]];
                let elev = self.data.points[p].elevation;
                Vector3::from_fn(|i, _| {
                    self.params.beta[lab][i][0] + self.params.beta[lab][i][1] * elev
                })
            })
            .collect();
    }

    #[inline]
    fn lambda_at(&self, p: usize) -> Vector3<f64> {
        let s = self.data.site_of_point[p];
        let mo = self.month_of_point[p];
        Vector3::from_fn(|i, _| self.state.lambda[s][i][mo])
    }

    /// Missing entries from the full normal, boundary entries from the
    /// normal truncated to (-inf, 0].
    fn update_augmented(&mut self, it: u64) {
        let seed = self.config.seed;
        let means: Vec<(usize, Vector3<f64>)> = (0..self.data.n_points())
            .filter(|&p| self.state.flags[p].iter().any(|&f| f != ObsFlag::Observed))
            .map(|p| (p, self.mean[p] + self.state.omega[p] + self.lambda_at(p)))
            .collect();
        let sigma = self.state.sigma2_eps.map(f64::sqrt);
        let flags = &self.state.flags;
        let draws: Vec<(usize, [Option<f64>; N_RESPONSES])> = means
            .par_iter()
            .map(|&(p, mu)| {
                let mut rng = substream(seed, Stream::Fit, &[it, BLK_AUGMENT, p as u64]);
                let mut out = [None; N_RESPONSES];
                for i in 0..N_RESPONSES {
                    out[i] = match flags[p][i] {
                        ObsFlag::Observed => None,
                        ObsFlag::Missing => Some(sample_normal(mu[i], sigma[i], &mut rng)),
                        ObsFlag::Censored => {
                            Some(sample_normal_below(mu[i], sigma[i], 0.0, &mut rng))
                        }
                    };
                }
                (p, out)
            })
            .collect();
        for (p, vals) in draws {
            for i in 0..N_RESPONSES {
                if let Some(v) = vals[i] {
                    self.state.y[p][i] = v;
                }
            }
        }
    }

    /// Conjugate normal draw per (ecoregion label, response).
    fn update_beta(&mut self, it: u64) -> Result<()> {
        for (lab, _) in self.labels.iter().enumerate() {
            for i in 0..N_RESPONSES {
                let mut rng = substream(
                    self.config.seed,
                    Stream::Fit,
                    &[it, BLK_BETA, (lab * N_RESPONSES + i) as u64],
                );
                let mut xtx = Matrix2::zeros();
                let mut xtr = Vector2::zeros();
                let mut count = 0usize;
                for (s, &slab) in self.label_of_site.iter().enumerate() {
                    if slab != lab {
                        continue;
                    }
                    for &p in &self.points_of_site[s] {
                        let elev = self.data.points[p].elevation;
                        let x = Vector2::new(1.0, elev);
                        let r = self.state.y[p][i]
                            - self.state.omega[p][i]
                            - self.state.lambda[s][i][self.month_of_point[p]];
                        xtx += x * x.transpose();
                        xtr += x * r;
                        count += 1;
                    }
                }
                let draw = if count == 0 {
                    eprintln!("warning: ecoregion label index {lab} has no observations; beta drawn from the prior");
                    let sd = self.priors.beta_var.sqrt();
                    [sample_normal(0.0, sd, &mut rng), sample_normal(0.0, sd, &mut rng)]
                } else {
                    conjugate_linear_draw(
                        &xtx,
                        &xtr,
                        self.state.sigma2_eps[i],
                        self.priors.beta_var,
                        &mut rng,
                    )?
                };
                self.params.beta[lab][i] = draw;
            }
        }
        self.state.beta = self.params.beta.clone();
        self.refresh_means();
        Ok(())
    }

    /// Exact 12-dimensional conjugate draw per (site, response).
    fn update_lambda(&mut self, it: u64) -> Result<()> {
        // Shared prior precision per response for the current phi_cy.
        let mut prior_prec: [SMatrix<f64, MONTHS, MONTHS>; N_RESPONSES] =
            [SMatrix::zeros(); N_RESPONSES];
        for i in 0..N_RESPONSES {
            let k = cyclical_corr_matrix(self.params.cyclical[i].phi_cy, self.config.period)
                * self.params.cyclical[i].sigma2_cy;
            let chol = k
                .cholesky()
                .ok_or_else(|| Error::Numerical("cyclical covariance not SPD".into()))?;
            prior_prec[i] = chol.inverse();
        }
        let seed = self.config.seed;
        let n_sites = self.data.sites.len();
        let results: Result<Vec<(usize, [[f64; MONTHS]; N_RESPONSES])>> = (0..n_sites)
            .into_par_iter()
            .map(|s| {
                let mut out = [[0.0; MONTHS]; N_RESPONSES];
                for i in 0..N_RESPONSES {
                    let mut rng = substream(
                        seed,
                        Stream::Fit,
                        &[it, BLK_LAMBDA, (s * N_RESPONSES + i) as u64],
                    );
                    let mut counts = [0.0f64; MONTHS];
                    let mut sums = [0.0f64; MONTHS];
                    for &p in &self.points_of_site[s] {
                        let mo = self.month_of_point[p];
                        let r = self.state.y[p][i] - self.mean[p][i] - self.state.omega[p][i];
                        counts[mo] += 1.0;
                        sums[mo] += r;
                    }
                    let mut q = prior_prec[i];
                    let mut b = SMatrix::<f64, MONTHS, 1>::zeros();
                    for mo in 0..MONTHS {
                        q[(mo, mo)] += counts[mo] / self.state.sigma2_eps[i];
                        b[mo] = sums[mo] / self.state.sigma2_eps[i];
                    }
                    let qd = nalgebra::DMatrix::from_fn(MONTHS, MONTHS, |r_, c| q[(r_, c)]);
                    let bd = DVector::from_fn(MONTHS, |r_, _| b[r_]);
                    let draw = mvn_draw_from_precision(qd, &bd, &mut rng)?;
                    for mo in 0..MONTHS {
                        out[i][mo] = draw[mo];
                    }
                }
                Ok((s, out))
            })
            .collect();
        for (s, lam) in results? {
            self.state.lambda[s] = lam;
        }
        Ok(())
    }

    /// Sequential Gibbs sweep of the latent field: each omega_n combines
    /// its own NNGP factor, the factors of every successor conditioning on
    /// it, and the data likelihood at the point.
    fn update_omega(&mut self, it: u64) -> Result<()> {
        let n = self.data.n_points();
        let mut nbr_vals = DVector::zeros(3 * self.graph.m);
        for p in 0..n {
            let (prec, lin) = self.omega_conditional(p, &mut nbr_vals);
            let mut rng = substream(self.config.seed, Stream::Fit, &[it, BLK_OMEGA, p as u64]);
            self.state.omega[p] = mvn_draw_from_precision3(&prec, &lin, &mut rng)?;
        }
        Ok(())
    }

    /// Precision and linear term of the full conditional of omega_p.
    fn omega_conditional(
        &self,
        p: usize,
        nbr_vals: &mut DVector<f64>,
    ) -> (Matrix3<f64>, Vector3<f64>) {
        let w = self.weights.at(p);
        // Prior factor of p itself.
        let mut prec = w.f_inv;
        let prior_mean = self.factor_mean(p, nbr_vals);
        let mut lin = w.f_inv * prior_mean;
        // Co-neighbor factors.
        for &(succ, slot) in &self.graph.co_neighbors[p] {
            let ws = self.weights.at(succ);
            let b_slot = block3(&ws.b, slot);
            // Residual of the successor factor excluding p's contribution.
            let mut pred = Vector3::zeros();
            for (j, &q) in self.graph.neighbors[succ].iter().enumerate() {
                if j == slot {
                    continue;
                }
                pred += block3(&ws.b, j) * self.state.omega[q];
            }
            let t = self.state.omega[succ] - pred;
            let bf = b_slot.transpose() * ws.f_inv;
            prec += bf * b_slot;
            lin += bf * t;
        }
        // Data term (responses are complete after augmentation).
        for i in 0..N_RESPONSES {
            let s2 = self.state.sigma2_eps[i];
            prec[(i, i)] += 1.0 / s2;
            let r = self.state.y[p][i] - self.mean[p][i] - self.lambda_at(p)[i];
            lin[i] += r / s2;
        }
        (prec, lin)
    }

    /// B_n * omega-neighbors for point p.
    fn factor_mean(&self, p: usize, scratch: &mut DVector<f64>) -> Vector3<f64> {
        let nbrs = &self.graph.neighbors[p];
        if nbrs.is_empty() {
            return Vector3::zeros();
        }
        for (j, &q) in nbrs.iter().enumerate() {
            scratch[3 * j] = self.state.omega[q][0];
            scratch[3 * j + 1] = self.state.omega[q][1];
            scratch[3 * j + 2] = self.state.omega[q][2];
        }
        let vals = scratch.rows(0, 3 * nbrs.len());
        let m = &self.weights.at(p).b * vals;
        Vector3::new(m[0], m[1], m[2])
    }

    /// Conjugate inverse-gamma draw of the nugget variances.
    fn update_nuggets(&mut self, it: u64) {
        let n = self.data.n_points() as f64;
        for i in 0..N_RESPONSES {
            let mut rng = substream(self.config.seed, Stream::Fit, &[it, BLK_NUGGET, i as u64]);
            let mut ssq = 0.0;
            for p in 0..self.data.n_points() {
                let r = self.state.y[p][i]
                    - self.mean[p][i]
                    - self.state.omega[p][i]
                    - self.lambda_at(p)[i];
                ssq += r * r;
            }
            let shape = self.priors.sigma2_shape + n / 2.0;
            let rate = self.priors.sigma2_rate + ssq / 2.0;
            self.state.sigma2_eps[i] = sample_inverse_gamma(shape, rate, &mut rng);
        }
        self.params.sigma2_eps = self.state.sigma2_eps;
    }

    /// Random-walk Metropolis over the Gneiting parameters (per component),
    /// Sigma (log-Cholesky), and the cyclical parameters (per component).
    fn update_covariance(&mut self, it: u64) -> Result<()> {
        let adapting = (it as usize) <= self.config.burn_in;
        let window = self.config.adapt_window;
        let mut ld = crate::nngp::nngp_logdensity(&self.state.omega, &self.graph, &self.weights)?;

        // Gneiting parameters, one component at a time. The kernel is a
        // mixture: mostly a random walk on the unconstrained scale, but a
        // 10% share of independence proposals drawn uniformly from the
        // prior support. The likelihood over these parameters has broad
        // flat regions (long ranges look alike inside a finite domain); a
        // pure random walk with a frozen scale can take thousands of
        // iterations to cross them, while prior-draw proposals jump freely
        // (the priors are uniform, so their ratio is exactly the
        // likelihood ratio).
        for i in 0..N_RESPONSES {
            let mut rng = substream(self.config.seed, Stream::Fit, &[it, BLK_COV, i as u64]);
            let cur = self.params.thetas[i];
            let independent = rng.random::<f64>() < 0.1;
            let (proposal, walk_correction) = if independent {
                let p = GneitingParams {
                    phi_sp: rng.random_range(self.priors.phi_sp_range.0..self.priors.phi_sp_range.1),
                    phi_ti: rng.random_range(self.priors.phi_ti_range.0..self.priors.phi_ti_range.1),
                    eta: rng.random_range(0.0..1.0),
                };
                (p, 0.0)
            } else {
                let x =
                    [cur.phi_sp.ln(), cur.phi_ti.ln(), logit(cur.eta.clamp(1e-12, 1.0 - 1e-12))];
                let sc = self.gneiting_scales[i].scale;
                let xp: [f64; 3] = std::array::from_fn(|k| {
                    x[k] + sc * rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let p = GneitingParams {
                    phi_sp: xp[0].exp(),
                    phi_ti: xp[1].exp(),
                    eta: sigmoid(xp[2]),
                };
                let corr = (xp[0] - x[0]) + (xp[1] - x[1]) + logit_jacobian(xp[2])
                    - logit_jacobian(x[2]);
                (p, corr)
            };
            let in_support = proposal.phi_sp >= self.priors.phi_sp_range.0
                && proposal.phi_sp <= self.priors.phi_sp_range.1
                && proposal.phi_ti >= self.priors.phi_ti_range.0
                && proposal.phi_ti <= self.priors.phi_ti_range.1;
            let mut accepted = false;
            if in_support {
                let mut thetas = self.params.thetas;
                thetas[i] = proposal;
                let weights = build_weight_cache(&self.graph, &self.coreg, &thetas)?;
                let ld_new =
                    crate::nngp::nngp_logdensity(&self.state.omega, &self.graph, &weights)?;
                let log_ratio = ld_new - ld + walk_correction;
                if rng.random::<f64>().ln() < log_ratio {
                    self.params.thetas = thetas;
                    self.weights = weights;
                    ld = ld_new;
                    accepted = true;
                }
            }
            if !independent {
                self.gneiting_scales[i]
                    .record(accepted, if adapting { window } else { usize::MAX });
            }
        }

        // Sigma on the log-Cholesky scale.
        {
            let mut rng = substream(self.config.seed, Stream::Fit, &[it, BLK_COV, 3]);
            let v = self.sigma_log_chol;
            let sc = self.sigma_scale.scale;
            let vp: [f64; 6] = std::array::from_fn(|k| {
                v[k] + sc * rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let sigma_new = log_chol_to_sigma(&vp);
            let mut accepted = false;
            if let Ok(coreg_new) = sym_sqrt(&sigma_new) {
                let weights = build_weight_cache(&self.graph, &coreg_new, &self.params.thetas)?;
                let ld_new =
                    crate::nngp::nngp_logdensity(&self.state.omega, &self.graph, &weights)?;
                let log_ratio = ld_new - ld
                    + ln_inverse_wishart_identity(&sigma_new, self.priors.sigma_iw_df)
                    - ln_inverse_wishart_identity(&self.params.sigma, self.priors.sigma_iw_df)
                    + log_chol_jacobian(&vp)
                    - log_chol_jacobian(&v);
                if rng.random::<f64>().ln() < log_ratio {
                    self.params.sigma = sigma_new;
                    self.coreg = coreg_new;
                    self.weights = weights;
                    self.sigma_log_chol = vp;
                    accepted = true;
                }
            }
            self.sigma_scale.record(accepted, if adapting { window } else { usize::MAX });
        }

        // Cyclical parameters: likelihood is the lambda prior over sites.
        for i in 0..N_RESPONSES {
            let mut rng = substream(self.config.seed, Stream::Fit, &[it, BLK_COV, 4 + i as u64]);
            let cur = self.params.cyclical[i];
            let x = [cur.sigma2_cy.ln(), cur.phi_cy.ln()];
            let sc = self.cyclical_scales[i].scale;
            let xp: [f64; 2] = std::array::from_fn(|k| {
                x[k] + sc * rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let proposal = CyclicalParams { sigma2_cy: xp[0].exp(), phi_cy: xp[1].exp() };
            let mut accepted = false;
            if proposal.phi_cy >= self.priors.phi_cy_range.0
                && proposal.phi_cy <= self.priors.phi_cy_range.1
            {
                let ll_cur = self.lambda_loglik(i, &cur)?;
                let ll_new = self.lambda_loglik(i, &proposal)?;
                let log_ratio = ll_new - ll_cur
                    + ln_inverse_gamma(
                        proposal.sigma2_cy,
                        self.priors.sigma2_shape,
                        self.priors.sigma2_rate,
                    )
                    - ln_inverse_gamma(
                        cur.sigma2_cy,
                        self.priors.sigma2_shape,
                        self.priors.sigma2_rate,
                    )
                    + (xp[0] - x[0])
                    + (xp[1] - x[1]);
                if rng.random::<f64>().ln() < log_ratio {
                    self.params.cyclical[i] = proposal;
                    accepted = true;
                }
            }
            self.cyclical_scales[i].record(accepted, if adapting { window } else { usize::MAX });
        }
        Ok(())
    }

    /// Interleaved non-centered update of the Gneiting parameters. The
    /// centered Metropolis step above conditions on omega, which encodes
    /// the current decay parameters, so distant proposals are rejected
    /// even when the data would prefer them and the chain can pin eta or
    /// phi_sp in a narrow wrong region. Here the whitened innovations
    /// v = whiten(A^-1 omega) of one component are held fixed while the
    /// parameters move, the field is re-colored under the proposal, and
    /// the acceptance ratio reduces to the data-likelihood ratio (the
    /// innovations' standard-normal density is invariant and the
    /// whitening Jacobians cancel against the field's prior).
    fn update_gneiting_whitened(&mut self, it: u64) -> Result<()> {
        let adapting = (it as usize) <= self.config.burn_in;
        let window = self.config.adapt_window;
        let a = self.coreg.a_matrix;
        let a_inv = a
            .try_inverse()
            .ok_or_else(|| Error::Numerical("coregionalization matrix not invertible".into()))?;
        // w = A^-1 omega pointwise: independent scalar component fields.
        let mut w: Vec<Vector3<f64>> = self.state.omega.iter().map(|o| a_inv * o).collect();
        let mut any_accepted = false;
        for i in 0..N_RESPONSES {
            let mut rng = substream(self.config.seed, Stream::Fit, &[it, BLK_COV_NC, i as u64]);
            let cur = self.params.thetas[i];
            let x = [cur.phi_sp.ln(), cur.phi_ti.ln(), logit(cur.eta.clamp(1e-12, 1.0 - 1e-12))];
            let sc = self.gneiting_nc_scales[i].scale;
            let xp: [f64; 3] = std::array::from_fn(|k| {
                x[k] + sc * rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let proposal =
                GneitingParams { phi_sp: xp[0].exp(), phi_ti: xp[1].exp(), eta: sigmoid(xp[2]) };
            let walk_correction =
                (xp[0] - x[0]) + (xp[1] - x[1]) + logit_jacobian(xp[2]) - logit_jacobian(x[2]);
            let in_support = proposal.phi_sp >= self.priors.phi_sp_range.0
                && proposal.phi_sp <= self.priors.phi_sp_range.1
                && proposal.phi_ti >= self.priors.phi_ti_range.0
                && proposal.phi_ti <= self.priors.phi_ti_range.1;
            let mut accepted = false;
            if in_support {
                let sw_cur = scalar_weight_set(&self.graph, &cur)?;
                let wi: Vec<f64> = w.iter().map(|p| p[i]).collect();
                let v = whiten_component(&wi, &self.graph, &sw_cur);
                let sw_new = scalar_weight_set(&self.graph, &proposal)?;
                let wi_new = color_component(&v, &self.graph, &sw_new);
                // Only the data term changes; the field shift at point p is
                // A e_i (w'_pi - w_pi) across all three responses.
                let mut delta_ll = 0.0;
                for p in 0..self.data.n_points() {
                    let d = wi_new[p] - wi[p];
                    if d == 0.0 {
                        continue;
                    }
                    let lam = self.lambda_at(p);
                    for j in 0..N_RESPONSES {
                        let r = self.state.y[p][j]
                            - self.mean[p][j]
                            - self.state.omega[p][j]
                            - lam[j];
                        let rp = r - a[(j, i)] * d;
                        delta_ll += -0.5 * (rp * rp - r * r) / self.state.sigma2_eps[j];
                    }
                }
                if rng.random::<f64>().ln() < delta_ll + walk_correction {
                    for p in 0..self.data.n_points() {
                        let d = wi_new[p] - wi[p];
                        for j in 0..N_RESPONSES {
                            self.state.omega[p][j] += a[(j, i)] * d;
                        }
                        w[p][i] = wi_new[p];
                    }
                    self.params.thetas[i] = proposal;
                    accepted = true;
                    any_accepted = true;
                }
            }
            self.gneiting_nc_scales[i].record(accepted, if adapting { window } else { usize::MAX });
        }
        if any_accepted {
            self.weights = build_weight_cache(&self.graph, &self.coreg, &self.params.thetas)?;
        }
        Ok(())
    }

    /// Sum over sites of the 12-dim normal log-density of lambda under the
    /// given cyclical parameters.
    fn lambda_loglik(&self, resp: usize, p: &CyclicalParams) -> Result<f64> {
        let r = cyclical_corr_matrix(p.phi_cy, self.config.period);
        let chol =
            r.cholesky().ok_or_else(|| Error::Numerical("cyclical correlation not SPD".into()))?;
        let ln_det_r = 2.0 * (0..MONTHS).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
        let ln_det_k = MONTHS as f64 * p.sigma2_cy.ln() + ln_det_r;
        let mut total = 0.0;
        for lam in &self.state.lambda {
            let v = SMatrix::<f64, MONTHS, 1>::from_fn(|mo, _| lam[resp][mo]);
            let quad = v.dot(&chol.solve(&v)) / p.sigma2_cy;
            total += -0.5 * (MONTHS as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det_k + quad);
        }
        Ok(total)
    }

    /// Observed-data log-likelihood (censored terms included, missing and
    /// augmented contributions excluded).
    pub fn observed_loglik(&self) -> f64 {
        (0..self.data.n_points())
            .map(|p| {
                loglik_point(
                    &self.state.y[p],
                    &self.mean[p],
                    &self.state.omega[p],
                    &self.lambda_at(p),
                    &self.state.sigma2_eps,
                    &self.state.flags[p],
                )
            })
            .sum()
    }

    fn iterate(&mut self, it: u64) -> Result<()> {
        self.update_augmented(it);
        self.update_beta(it)?;
        self.update_lambda(it)?;
        self.update_omega(it)?;
        self.update_nuggets(it);
        // Hold the covariance parameters for the first stretch of burn-in so
        // the latent field equilibrates under the initial covariance first;
        // otherwise the decay parameters chase the rough starting field into
        // a flat region of the likelihood and take long to return.
        let cov_delay = (self.config.burn_in / 5) as u64;
        if !self.config.fix_covariance && it > cov_delay {
            self.update_covariance(it)?;
            self.update_gneiting_whitened(it)?;
        }
        Ok(())
    }

    fn acceptance_summary(&self) -> Vec<(String, f64)> {
        let mut v = Vec::new();
        for i in 0..N_RESPONSES {
            v.push((format!("gneiting_{}", i + 1), self.gneiting_scales[i].acceptance_rate()));
            v.push((
                format!("gneiting_whitened_{}", i + 1),
                self.gneiting_nc_scales[i].acceptance_rate(),
            ));
            v.push((format!("cyclical_{}", i + 1), self.cyclical_scales[i].acceptance_rate()));
        }
        v.push(("sigma".into(), self.sigma_scale.acceptance_rate()));
        v
    }
}

fn block3(b: &nalgebra::DMatrix<f64>, slot: usize) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| b[(r, 3 * slot + c)])
}

/// Run the sampler and archive every thin-th post-burn-in draw.
pub fn run_chain(
    data: &Dataset,
    config: &SamplerConfig,
    priors: &Priors,
) -> Result<PosteriorArchive> {
    let mut chain = Chain::new(data, config, priors)?;
    let mut archive = PosteriorArchive::new(
        config.clone(),
        priors.clone(),
        chain.transform,
        chain.labels.clone(),
        data.sites.len(),
        data.n_points(),
    );
    for it in 1..=config.iterations as u64 {
        if let Err(e) = chain.iterate(it) {
            let checkpoint = serde_json::json!({
                "iteration": it,
                "params": &chain.params,
                "error": e.to_string(),
            });
            let path = std::env::temp_dir().join("climgp-checkpoint.json");
            let _ = std::fs::write(&path, serde_json::to_vec_pretty(&checkpoint)?);
            return Err(Error::Numerical(format!(
                "iteration {it} failed ({e}); checkpoint written to {}",
                path.display()
            )));
        }
        if it as usize == config.burn_in {
            for s in chain.gneiting_scales.iter_mut() {
                s.freeze();
            }
            for s in chain.gneiting_nc_scales.iter_mut() {
                s.freeze();
            }
            for s in chain.cyclical_scales.iter_mut() {
                s.freeze();
            }
            chain.sigma_scale.freeze();
        }
        if it as usize > config.burn_in
            && (it as usize - config.burn_in).is_multiple_of(config.thin)
        {
            if !chain.state.censoring_holds() {
                return Err(Error::Numerical(format!(
                    "censoring invariant violated at iteration {it}"
                )));
            }
            let loglik = chain.observed_loglik();
            let latent = if config.store_latent {
                Some(LatentDraw {
                    omega: chain.state.omega.clone(),
                    lambda: chain.state.lambda.clone(),
                    y: chain.state.y.clone(),
                })
            } else {
                None
            };
            archive.push(chain.params.clone(), loglik, latent);
        }
    }
    archive.acceptance = chain.acceptance_summary();
    debug_assert_eq!(archive.draws.len(), config.kept_draws());
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Site, StationRecord};

    /// 4 sites, 24 months, deterministic synthetic values with a seasonal
    /// swing, a few missing cells and a few exact zeros (censoring).
    fn tiny_dataset() -> Dataset {
        let sites = vec![
            Site {
                id: 1,
                easting_km: 0.0,
                northing_km: 0.0,
                elevation_km: 0.1,
                labels: [1, 1, 1, 1, 1],
            },
            Site {
                id: 2,
                easting_km: 12.0,
                northing_km: 3.0,
                elevation_km: 0.4,
                labels: [1, 1, 1, 1, 1],
            },
            Site {
                id: 3,
                easting_km: 5.0,
                northing_km: 9.0,
                elevation_km: 0.9,
                labels: [1, 1, 1, 1, 2],
            },
            Site {
                id: 4,
                easting_km: 20.0,
                northing_km: 15.0,
                elevation_km: 1.3,
                labels: [1, 1, 1, 1, 2],
            },
        ];
        let mut records = Vec::new();
        for s in &sites {
            for k in 0..24u32 {
                let (year, month) = (2000 + (k / 12) as i32, k % 12 + 1);
                let season = (2.0 * std::f64::consts::PI * month as f64 / 12.0).sin();
                let rain = (30.0 + 25.0 * season - 10.0 * s.elevation_km
                    + 3.0 * ((s.id as f64) + k as f64).sin())
                .max(0.0);
                let tmin = 5.0 + 8.0 * season - 6.0 * s.elevation_km;
                let range = (9.0 - 2.0 * season + ((k * s.id) as f64).cos()).max(0.0);
                let missing = (k + s.id) % 11 == 0;
                records.push(StationRecord {
                    site_id: s.id,
                    year,
                    month,
                    rain_mm: if missing { None } else { Some(if rain < 4.0 { 0.0 } else { rain }) },
                    tmin_c: Some(tmin),
                    tmax_c: if missing { None } else { Some(tmin + range) },
                });
            }
        }
        Dataset::from_records(sites, records).unwrap()
    }

    fn quick_config() -> SamplerConfig {
        SamplerConfig {
            iterations: 40,
            burn_in: 20,
            thin: 2,
            m: 6,
            tier: 5,
            seed: 42,
            adapt_window: 10,
            ..Default::default()
        }
    }

    #[test]
    fn chain_runs_and_archives_expected_draw_count() {
        let data = tiny_dataset();
        let config = quick_config();
        let archive = run_chain(&data, &config, &Priors::default()).unwrap();
        assert_eq!(archive.n_draws(), config.kept_draws());
        assert_eq!(archive.latent.len(), archive.n_draws());
        assert_eq!(archive.labels, vec![1, 2]);
        for (p, ll) in archive.draws.iter().zip(archive.logliks.iter()) {
            assert!(ll.is_finite());
            for i in 0..N_RESPONSES {
                assert!(p.thetas[i].phi_sp > 0.0 && p.thetas[i].phi_sp.is_finite());
                assert!((0.0..=1.0).contains(&p.thetas[i].eta));
                assert!(p.sigma2_eps[i] > 0.0);
                assert!(p.cyclical[i].sigma2_cy > 0.0);
            }
            assert!(p.sigma.cholesky().is_some());
        }
    }

    #[test]
    fn chain_is_deterministic_and_thread_count_invariant() {
        let data = tiny_dataset();
        let config = quick_config();
        let priors = Priors::default();
        let run_with = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_chain(&data, &config, &priors).unwrap())
        };
        let a = run_with(1);
        let b = run_with(4);
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.logliks, b.logliks);
        assert_eq!(a.latent, b.latent);
        let c = run_with(1);
        assert_eq!(a.draws, c.draws);
    }

    #[test]
    fn store_latent_off_leaves_latent_empty() {
        let data = tiny_dataset();
        let config = SamplerConfig { store_latent: false, ..quick_config() };
        let archive = run_chain(&data, &config, &Priors::default()).unwrap();
        assert_eq!(archive.n_draws(), config.kept_draws());
        assert!(archive.latent.is_empty());
    }

    #[test]
    fn fix_covariance_keeps_covariance_at_init() {
        let data = tiny_dataset();
        let init = ParameterSet::default_init(2);
        let config =
            SamplerConfig { fix_covariance: true, init: Some(init.clone()), ..quick_config() };
        let archive = run_chain(&data, &config, &Priors::default()).unwrap();
        for p in &archive.draws {
            assert_eq!(p.thetas, init.thetas);
            assert_eq!(p.sigma, init.sigma);
            assert_eq!(p.cyclical, init.cyclical);
            // Nuggets and beta still move.
            assert_ne!(p.sigma2_eps, init.sigma2_eps);
        }
    }

    #[test]
    fn dic_consistency_on_tiny_fit() {
        let data = tiny_dataset();
        let config = quick_config();
        let archive = run_chain(&data, &config, &Priors::default()).unwrap();
        let r = super::super::dic(&archive, &data).unwrap();
        let d_bar_hand =
            archive.logliks.iter().map(|l| -2.0 * l).sum::<f64>() / archive.logliks.len() as f64;
        assert!((r.d_bar - d_bar_hand).abs() < 1e-10);
        assert!((r.dic - (r.d_bar + r.p_d)).abs() < 1e-10);
        assert!((r.p_d - (r.d_bar - r.d_hat)).abs() < 1e-10);
        assert!(r.dic.is_finite());
    }

    #[test]
    fn omega_full_conditional_matches_dense_precision_oracle() {
        let data = tiny_dataset();
        let config = SamplerConfig { m: 5, ..quick_config() };
        let mut chain = Chain::new(&data, &config, &Priors::default()).unwrap();
        // Randomize the state so the check is nontrivial.
        let mut rng = crate::rng::substream(3, Stream::Fit, &[77]);
        use rand_distr::StandardNormal;
        for p in 0..data.n_points() {
            for i in 0..N_RESPONSES {
                chain.state.omega[p][i] = rng.sample::<f64, _>(StandardNormal);
                chain.state.y[p][i] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        for s in 0..data.sites.len() {
            for i in 0..N_RESPONSES {
                for mo in 0..crate::model::MONTHS {
                    chain.state.lambda[s][i][mo] = 0.3 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        chain.state.sigma2_eps = [0.4, 0.7, 1.3];
        // Dense oracle: posterior precision = implied NNGP precision plus
        // the data diagonal; linear term from the residuals.
        let n = data.n_points();
        let q_prior = crate::nngp::implied_precision(&chain.graph, &chain.weights, 3 * n).unwrap();
        let mut q_post = q_prior.clone();
        let mut b = nalgebra::DVector::<f64>::zeros(3 * n);
        for p in 0..n {
            for i in 0..N_RESPONSES {
                let s2 = chain.state.sigma2_eps[i];
                q_post[(3 * p + i, 3 * p + i)] += 1.0 / s2;
                let r = chain.state.y[p][i] - chain.mean[p][i] - chain.lambda_at(p)[i];
                b[3 * p + i] = r / s2;
            }
        }
        let mut scratch = DVector::zeros(3 * chain.graph.m);
        for p in [0usize, 1, 5, n / 2, n - 1] {
            let (prec, lin) = chain.omega_conditional(p, &mut scratch);
            for a in 0..3 {
                for c in 0..3 {
                    let exact = q_post[(3 * p + a, 3 * p + c)];
                    assert!(
                        (prec[(a, c)] - exact).abs() < 1e-9 * (1.0 + exact.abs()),
                        "precision block mismatch at point {p} ({a},{c}): {} vs {exact}",
                        prec[(a, c)]
                    );
                }
                // lin_a = b_a - sum_{q != p-block} Q[p,a; q] omega_q.
                let mut exact = b[3 * p + a];
                for q in 0..n {
                    if q == p {
                        continue;
                    }
                    for c in 0..3 {
                        exact -= q_post[(3 * p + a, 3 * q + c)] * chain.state.omega[q][c];
                    }
                }
                assert!(
                    (lin[a] - exact).abs() < 1e-9 * (1.0 + exact.abs()),
                    "linear term mismatch at point {p} component {a}: {} vs {exact}",
                    lin[a]
                );
            }
        }
    }

    #[test]
    fn censored_entries_stay_nonpositive_in_every_draw() {
        let data = tiny_dataset();
        let mut chain = Chain::new(&data, &quick_config(), &Priors::default()).unwrap();
        for it in 1..=10 {
            chain.iterate(it).unwrap();
            assert!(chain.state.censoring_holds());
        }
    }
}
