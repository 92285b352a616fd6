//! Python bindings for the climate Gaussian-process library: covariance
//! building blocks, the coregionalization square root, synthetic data
//! generation and a small fitting entry point.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use climgp::covariance::{
    self, cross_correlations, sym_sqrt, CyclicalParams, GneitingParams, RangeKind,
};
use climgp::inference::{posterior_mean_parameters, run_chain, Priors, SamplerConfig};
use climgp::simulate::{simulate, uniform_sites, SimulationSpec};
use climgp::spacetime::Lag;
use nalgebra::Matrix3;

fn err(e: climgp::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix3(rows: [[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| rows[r][c])
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

/// Nonseparable space-time correlation at spatial lag `h_s_km` (km) and
/// temporal lag `h_t_years` (years).
#[pyfunction]
fn gneiting_correlation(
    h_s_km: f64,
    h_t_years: f64,
    phi_sp: f64,
    phi_ti: f64,
    eta: f64,
) -> PyResult<f64> {
    let p = GneitingParams::new(phi_sp, phi_ti, eta).map_err(err)?;
    let lag = Lag { h_s: h_s_km, h_t: h_t_years, ..Lag::ZERO };
    Ok(covariance::gneiting_corr(&lag, &p))
}

/// Annual-cycle covariance at circular lag `d_circ_years` (geodesic distance
/// on the yearly circle, in years).
#[pyfunction]
fn cyclical_covariance(d_circ_years: f64, sigma2_cy: f64, phi_cy: f64) -> PyResult<f64> {
    let p = CyclicalParams::new(sigma2_cy, phi_cy).map_err(err)?;
    let lag = Lag { d_circ: d_circ_years, ..Lag::ZERO };
    Ok(covariance::cyclical_cov(&lag, &p))
}

/// Lag at which the correlation falls to 0.05. `kind` is "spatial" (km),
/// "cyclical" (years) or "temporal" (years).
#[pyfunction]
fn practical_range(kind: &str, decay: f64) -> PyResult<f64> {
    let kind = match kind {
        "spatial" => RangeKind::Spatial,
        "cyclical" => RangeKind::Cyclical,
        "temporal" => RangeKind::Temporal,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown range kind {other:?}; expected spatial, cyclical or temporal"
            )))
        }
    };
    Ok(covariance::practical_range(kind, decay))
}

/// Proportions of total variance attributable to the seasonal, nugget and
/// space-time components.
#[pyfunction]
fn variance_decomposition(
    sigma2_cy: f64,
    sigma2_eps: f64,
    sigma2_omega: f64,
) -> PyResult<(f64, f64, f64)> {
    covariance::variance_decomposition(sigma2_cy, sigma2_eps, sigma2_omega).map_err(err)
}

/// Symmetric square root A of an SPD 3x3 matrix, with A A' = Sigma.
#[pyfunction]
fn symmetric_sqrt(sigma: [[f64; 3]; 3]) -> PyResult<[[f64; 3]; 3]> {
    let coreg = sym_sqrt(&matrix3(sigma)).map_err(err)?;
    Ok(rows(&coreg.a_matrix))
}

/// Pairwise correlations (rho_12, rho_13, rho_23) of an SPD 3x3 matrix.
#[pyfunction]
fn correlations(sigma: [[f64; 3]; 3]) -> PyResult<(f64, f64, f64)> {
    Ok(cross_correlations(&matrix3(sigma)))
}

/// Simulate a synthetic monthly station dataset and return it as CSV text
/// (same schema the command-line tool reads).
#[pyfunction]
#[pyo3(signature = (n_sites, n_months, seed, extent_km=100.0, missing_rate=0.05))]
fn simulate_stations(
    n_sites: usize,
    n_months: usize,
    seed: u64,
    extent_km: f64,
    missing_rate: f64,
) -> PyResult<String> {
    let sites = uniform_sites(n_sites, extent_km, &[[1, 1, 1, 1, 1], [1, 1, 1, 1, 2]], seed);
    let mut params = climgp::inference::ParameterSet::default_init(2);
    params.sigma = Matrix3::new(0.413, 0.09, -0.06, 0.09, 0.35, 0.12, -0.06, 0.12, 0.30);
    for (i, t) in params.thetas.iter_mut().enumerate() {
        t.phi_sp = [0.188, 0.120, 0.150][i];
        t.phi_ti = 6.0;
        t.eta = [0.774, 0.5, 0.64][i];
    }
    for (i, c) in params.cyclical.iter_mut().enumerate() {
        c.sigma2_cy = [0.617, 0.45, 0.38][i];
        c.phi_cy = 9.76;
    }
    params.sigma2_eps = [0.176, 0.12, 0.15];
    for (l, b) in params.beta.iter_mut().enumerate() {
        *b = [[1.8 + 0.1 * l as f64, -0.4], [0.1 * l as f64, -0.3], [1.8 + 0.1 * l as f64, 0.2]];
    }
    let spec = SimulationSpec { sites, params, n_months, missing_rate, seed, ..Default::default() };
    let out = simulate(&spec).map_err(err)?;
    let mut buf = Vec::new();
    climgp::data::write_station_csv(&mut buf, &out.data).map_err(err)?;
    String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Fit the hierarchical model to station CSV text and return posterior
/// means of the main parameters as a dict.
#[pyfunction]
#[pyo3(signature = (csv_text, iterations=2000, burn_in=1000, thin=10, m=10, seed=1))]
fn fit_stations(
    py: Python<'_>,
    csv_text: &str,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    m: usize,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let data = climgp::data::read_station_csv(csv_text.as_bytes()).map_err(err)?;
    let config = SamplerConfig { iterations, burn_in, thin, m, seed, ..Default::default() };
    let archive = run_chain(&data, &config, &Priors::default()).map_err(err)?;
    let means = posterior_mean_parameters(&archive).map_err(err)?;
    let d = PyDict::new(py);
    for i in 0..3 {
        let k = i + 1;
        d.set_item(format!("phi_sp_{k}"), means.thetas[i].phi_sp)?;
        d.set_item(format!("phi_ti_{k}"), means.thetas[i].phi_ti)?;
        d.set_item(format!("eta_{k}"), means.thetas[i].eta)?;
        d.set_item(format!("sigma2_cy_{k}"), means.cyclical[i].sigma2_cy)?;
        d.set_item(format!("phi_cy_{k}"), means.cyclical[i].phi_cy)?;
        d.set_item(format!("sigma2_eps_{k}"), means.sigma2_eps[i])?;
    }
    d.set_item("sigma", rows(&means.sigma))?;
    d.set_item(
        "beta",
        means
            .beta
            .iter()
            .map(|b| [[b[0][0], b[0][1]], [b[1][0], b[1][1]], [b[2][0], b[2][1]]])
            .collect::<Vec<_>>(),
    )?;
    d.set_item("n_draws", archive.n_draws())?;
    Ok(d.into())
}

#[pymodule]
fn climgp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gneiting_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(cyclical_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(practical_range, m)?)?;
    m.add_function(wrap_pyfunction!(variance_decomposition, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_sqrt, m)?)?;
    m.add_function(wrap_pyfunction!(correlations, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_stations, m)?)?;
    m.add_function(wrap_pyfunction!(fit_stations, m)?)?;
    Ok(())
}
