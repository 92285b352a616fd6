//! Deviance information criterion from an archive: DIC = D_bar + p_D with
//! p_D = D_bar - D(theta_hat). The deviance is -2 times the observed-data
//! log-likelihood (censored terms enter through the normal mass below
//! zero), and theta_hat plugs in posterior means taken on the unconstrained
//! sampling scale (logs for variances and decays, logit for eta,
//! log-Cholesky for Sigma) together with the latent-field means.

use nalgebra::Vector3;

use crate::data::Dataset;
use crate::model::{loglik_point, LatentState, MONTHS};
use crate::{Error, Result, N_RESPONSES};

use super::archive::PosteriorArchive;
use super::updates::{log_chol_to_sigma, logit, sigma_to_log_chol, sigmoid};
use super::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DicResult {
    pub dic: f64,
    /// Posterior mean deviance.
    pub d_bar: f64,
    /// Plug-in deviance at the posterior means.
    pub d_hat: f64,
    /// Effective number of parameters.
    pub p_d: f64,
}

/// Posterior mean of the continuous parameters on the unconstrained scale,
/// mapped back to the natural scale.
pub fn posterior_mean_parameters(archive: &PosteriorArchive) -> Result<ParameterSet> {
    if archive.draws.is_empty() {
        return Err(Error::ArchiveMismatch("archive holds no draws".into()));
    }
    let k = archive.draws.len() as f64;
    let n_labels = archive.labels.len();
    let mut mean = ParameterSet::default_init(n_labels);
    let mut theta_acc = [[0.0f64; 3]; N_RESPONSES];
    let mut cyc_acc = [[0.0f64; 2]; N_RESPONSES];
    let mut eps_acc = [0.0f64; N_RESPONSES];
    let mut chol_acc = [0.0f64; 6];
    let mut beta_acc = vec![[[0.0f64; 2]; N_RESPONSES]; n_labels];
    for d in &archive.draws {
        for i in 0..N_RESPONSES {
            theta_acc[i][0] += d.thetas[i].phi_sp.ln();
            theta_acc[i][1] += d.thetas[i].phi_ti.ln();
            theta_acc[i][2] += logit(d.thetas[i].eta.clamp(1e-12, 1.0 - 1e-12));
            cyc_acc[i][0] += d.cyclical[i].sigma2_cy.ln();
            cyc_acc[i][1] += d.cyclical[i].phi_cy.ln();
            eps_acc[i] += d.sigma2_eps[i].ln();
        }
        let v = sigma_to_log_chol(&d.sigma)?;
        for (acc, x) in chol_acc.iter_mut().zip(v.iter()) {
            *acc += x;
        }
        for (acc, b) in beta_acc.iter_mut().zip(d.beta.iter()) {
            for i in 0..N_RESPONSES {
                acc[i][0] += b[i][0];
                acc[i][1] += b[i][1];
            }
        }
    }
    for i in 0..N_RESPONSES {
        mean.thetas[i].phi_sp = (theta_acc[i][0] / k).exp();
        mean.thetas[i].phi_ti = (theta_acc[i][1] / k).exp();
        mean.thetas[i].eta = sigmoid(theta_acc[i][2] / k);
        mean.cyclical[i].sigma2_cy = (cyc_acc[i][0] / k).exp();
        mean.cyclical[i].phi_cy = (cyc_acc[i][1] / k).exp();
        mean.sigma2_eps[i] = (eps_acc[i] / k).exp();
    }
    let v: [f64; 6] = std::array::from_fn(|j| chol_acc[j] / k);
    mean.sigma = log_chol_to_sigma(&v);
    for (m, acc) in mean.beta.iter_mut().zip(beta_acc.iter()) {
        for i in 0..N_RESPONSES {
            m[i][0] = acc[i][0] / k;
            m[i][1] = acc[i][1] / k;
        }
    }
    Ok(mean)
}

/// DIC for the dataset the archive was fit on.
pub fn dic(archive: &PosteriorArchive, data: &Dataset) -> Result<DicResult> {
    if archive.logliks.is_empty() {
        return Err(Error::ArchiveMismatch("archive holds no draws".into()));
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
    let d_bar =
        archive.logliks.iter().map(|ll| -2.0 * ll).sum::<f64>() / archive.logliks.len() as f64;

    let mean_params = posterior_mean_parameters(archive)?;
    let latent = archive.latent_means()?;
    let labels = archive.labels.clone();
    let tier = archive.config.tier;
    // Observed values and flags on the model scale.
    let state = LatentState::init(data, &archive.transform, labels.len())?;
    let mut ll_hat = 0.0;
    for p in 0..data.n_points() {
        let lab = labels
            .binary_search(&data.tier_label(p, tier))
            .map_err(|_| Error::ArchiveMismatch("dataset label missing from archive".into()))?;
        let elev = data.points[p].elevation;
        let mean = Vector3::from_fn(|i, _| {
            mean_params.beta[lab][i][0] + mean_params.beta[lab][i][1] * elev
        });
        let s = data.site_of_point[p];
        let mo = (data.year_month[p].1 - 1) as usize % MONTHS;
        let lam = Vector3::from_fn(|i, _| latent.lambda[s][i][mo]);
        ll_hat += loglik_point(
            &state.y[p],
            &mean,
            &latent.omega[p],
            &lam,
            &mean_params.sigma2_eps,
            &state.flags[p],
        );
    }
    let d_hat = -2.0 * ll_hat;
    let p_d = d_bar - d_hat;
    Ok(DicResult { dic: d_bar + p_d, d_bar, d_hat, p_d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unconstrained_means_back_transform() {
        use super::super::{Priors, SamplerConfig};
        use crate::model::TransformSpec;
        let transform = TransformSpec {
            rain_scale: 1.0,
            tmin_center: 0.0,
            tmin_scale: 1.0,
            range_center: 0.0,
            range_scale: 1.0,
        };
        let mut a = PosteriorArchive::new(
            SamplerConfig { iterations: 4, burn_in: 2, thin: 1, ..Default::default() },
            Priors::default(),
            transform,
            vec![1],
            1,
            1,
        );
        let mut p1 = ParameterSet::default_init(1);
        p1.thetas[0].phi_sp = 0.1;
        p1.sigma2_eps[0] = 1.0;
        p1.beta[0][0][0] = 1.0;
        let mut p2 = p1.clone();
        p2.thetas[0].phi_sp = 0.4;
        p2.sigma2_eps[0] = 4.0;
        p2.beta[0][0][0] = 3.0;
        a.push(p1, -5.0, None);
        a.push(p2, -7.0, None);
        let m = posterior_mean_parameters(&a).unwrap();
        // Geometric means on the log scale, arithmetic for beta.
        assert_relative_eq!(m.thetas[0].phi_sp, 0.2, epsilon = 1e-12);
        assert_relative_eq!(m.sigma2_eps[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(m.beta[0][0][0], 2.0, epsilon = 1e-12);
    }
}
