//! Acceptance suite. Each test checks one release criterion end to end and
//! produces a single pass/fail line in the test report:
//!
//!  1. exact-GP equivalence of the neighbor approximation at m = N-1
//!  2. KL divergence to the exact GP is nonincreasing in m
//!  3. closed-form range and variance-share identities
//!  4. coregionalization square-root properties
//!  5. weight-cache correctness on a regular monthly design
//!  6. posterior recovery of the generative parameters on synthetic data
//!  7. DIC ordering between neighbor budgets (bundled with 6)
//!  8. prediction against dense kriging formulas
//!  9. censoring and physical validity of every archived and decoded state
//!     (checked inside 6 and 8)
//!
//! Criteria 6/7/9 share one long-running test so the thirty MCMC fits are
//! only paid for once.

use climgp::covariance::joint_covariance;
use climgp::covariance::{
    practical_range, sym_sqrt, variance_decomposition, CyclicalParams, GneitingParams, RangeKind,
};
use climgp::data::Site;
use climgp::inference::{dic, run_chain, ParameterSet, Priors, SamplerConfig};
use climgp::model::{decode_latent, LatentState, ObsFlag, TransformSpec};
use climgp::nngp::{
    build_graph, build_weight_cache, compute_weights_uncached, implied_precision, nngp_logdensity,
    CACHE_SLOTS,
};
use climgp::predict::{predict_series, PredictionTask};
use climgp::rng::{substream, Stream};
use climgp::simulate::{simulate, uniform_sites, SimulationOutput, SimulationSpec};
use climgp::spacetime::{canonical_order, month_to_time, SpaceTimePoint};
use climgp::N_RESPONSES;
use nalgebra::{DVector, Matrix3, Vector3};
use rand::Rng;

const LN_2PI: f64 = 1.8378770664093453;

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<SpaceTimePoint> {
    let mut pts: Vec<SpaceTimePoint> = (0..n)
        .map(|i| SpaceTimePoint {
            site_id: i as u32,
            easting: rng.random_range(0.0..60.0),
            northing: rng.random_range(0.0..60.0),
            time: month_to_time(2000 + rng.random_range(0..3), rng.random_range(1..=12)),
            elevation: rng.random_range(0.0..2.0),
        })
        .collect();
    let perm = canonical_order(&pts);
    pts = perm.iter().map(|&i| pts[i]).collect();
    pts
}

fn random_spd(rng: &mut impl Rng) -> Matrix3<f64> {
    let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    g * g.transpose() + Matrix3::identity() * rng.random_range(0.1..1.0)
}

fn random_thetas(rng: &mut impl Rng) -> [GneitingParams; N_RESPONSES] {
    std::array::from_fn(|_| GneitingParams {
        phi_sp: rng.random_range(0.05..1.0),
        phi_ti: rng.random_range(1.0..12.0),
        eta: rng.random_range(0.05..0.95),
    })
}

fn dense_logdensity(
    omega: &[Vector3<f64>],
    pts: &[SpaceTimePoint],
    sigma: &Matrix3<f64>,
    thetas: &[GneitingParams; N_RESPONSES],
) -> f64 {
    let n = pts.len();
    let coreg = sym_sqrt(sigma).unwrap();
    let cov = joint_covariance(pts, &coreg, thetas, 1.0, 3 * n).unwrap();
    let chol = cov.cholesky().unwrap();
    let mut x = DVector::zeros(3 * n);
    for (i, o) in omega.iter().enumerate() {
        for a in 0..3 {
            x[3 * i + a] = o[a];
        }
    }
    let ln_det: f64 = 2.0 * (0..3 * n).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    let quad = x.dot(&chol.solve(&x));
    -0.5 * (3.0 * n as f64 * LN_2PI + ln_det + quad)
}

#[test]
fn criterion_01_exact_gp_equivalence_at_full_neighbor_budget() {
    let mut rng = substream(41, Stream::Fit, &[1]);
    for trial in 0..50u64 {
        let n = 5 + (trial as usize) % 26; // 5..=30
        let pts = random_points(&mut rng, n);
        let sigma = random_spd(&mut rng);
        let thetas = random_thetas(&mut rng);
        let coreg = sym_sqrt(&sigma).unwrap();
        let graph = build_graph(&pts, n - 1, 2.0 / 30.0, 1.0).unwrap();
        let weights = build_weight_cache(&graph, &coreg, &thetas).unwrap();
        let omega: Vec<Vector3<f64>> =
            (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0))).collect();
        let approx = nngp_logdensity(&omega, &graph, &weights).unwrap();
        let exact = dense_logdensity(&omega, &pts, &sigma, &thetas);
        let rel = (approx - exact).abs() / exact.abs().max(1.0);
        assert!(
            rel < 1e-8,
            "trial {trial} (n={n}): approx {approx} vs exact {exact}, rel err {rel:.3e}"
        );
    }
}

#[test]
fn criterion_02_kl_divergence_nonincreasing_in_neighbor_count() {
    let mut rng = substream(42, Stream::Fit, &[2]);
    let n = 50;
    let pts = random_points(&mut rng, n);
    let sigma = Matrix3::new(0.413, 0.09, -0.06, 0.09, 0.35, 0.12, -0.06, 0.12, 0.30);
    let thetas = [
        GneitingParams { phi_sp: 0.188, phi_ti: 6.0, eta: 0.774 },
        GneitingParams { phi_sp: 0.120, phi_ti: 6.0, eta: 0.5 },
        GneitingParams { phi_sp: 0.150, phi_ti: 6.0, eta: 0.64 },
    ];
    let coreg = sym_sqrt(&sigma).unwrap();
    let d = 3 * n;
    let cov = joint_covariance(&pts, &coreg, &thetas, 1.0, d).unwrap();
    let cov_chol = cov.clone().cholesky().unwrap();
    let ln_det_c: f64 = 2.0 * (0..d).map(|i| cov_chol.l()[(i, i)].ln()).sum::<f64>();

    let mut last = f64::INFINITY;
    for m in [5usize, 10, 20, 49] {
        let graph = build_graph(&pts, m, 2.0 / 30.0, 1.0).unwrap();
        let weights = build_weight_cache(&graph, &coreg, &thetas).unwrap();
        let q = implied_precision(&graph, &weights, d).unwrap();
        let q_chol = q.clone().cholesky().unwrap();
        let ln_det_q: f64 = 2.0 * (0..d).map(|i| q_chol.l()[(i, i)].ln()).sum::<f64>();
        // KL( NNGP || exact ) with NNGP covariance Q^-1.
        let q_inv = q_chol.inverse();
        let trace = cov_chol.solve(&q_inv).trace();
        let kl = 0.5 * (trace - d as f64 + ln_det_c + ln_det_q);
        assert!(kl <= last + 1e-9, "KL increased from {last:.6e} to {kl:.6e} at m={m}");
        if m == 49 {
            assert!(kl < 1e-10, "KL at m=N-1 is {kl:.3e}, expected < 1e-10");
        }
        last = kl;
    }
}

#[test]
fn criterion_03_range_and_variance_share_identities() {
    let spatial = practical_range(RangeKind::Spatial, 0.188);
    assert!(
        (15.9..=16.0).contains(&spatial),
        "spatial practical range {spatial} km outside [15.9, 16.0]"
    );
    let cyclical_days = practical_range(RangeKind::Cyclical, 9.760) * 365.25;
    assert!(
        (112.0..=112.4).contains(&cyclical_days),
        "cyclical practical range {cyclical_days} days outside [112.0, 112.4]"
    );
    let (cy, eps, om) = variance_decomposition(0.617, 0.176, 0.413).unwrap();
    assert!((cy - 0.512).abs() <= 0.001, "seasonal share {cy}");
    assert!((eps - 0.146).abs() <= 0.001, "nugget share {eps}");
    assert!((om - 0.342).abs() <= 0.001, "space-time share {om}");
}

#[test]
fn criterion_04_coregionalization_square_root_properties() {
    let perms: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut rng = substream(44, Stream::Fit, &[4]);
    for trial in 0..1000 {
        let sigma = random_spd(&mut rng);
        let coreg = sym_sqrt(&sigma).unwrap();
        let a = coreg.a_matrix;
        let aa = a * a.transpose();
        for r in 0..3 {
            for c in 0..3 {
                assert!(
                    (aa[(r, c)] - sigma[(r, c)]).abs() < 1e-10,
                    "trial {trial}: AA' mismatch at ({r},{c})"
                );
            }
        }
        let p = perms[trial % 6];
        let d = Matrix3::from_fn(|r, c| if p[r] == c { 1.0 } else { 0.0 });
        let permuted = sym_sqrt(&(d * sigma * d.transpose())).unwrap();
        let expect = d * a * d.transpose();
        for r in 0..3 {
            for c in 0..3 {
                assert!(
                    (permuted.a_matrix[(r, c)] - expect[(r, c)]).abs() < 1e-10,
                    "trial {trial}: permutation equivariance fails at ({r},{c})"
                );
            }
        }
    }
}

#[test]
fn criterion_05_weight_cache_equals_direct_recomputation() {
    let sites = uniform_sites(10, 40.0, &[[1, 1, 1, 1, 1]], 55);
    let mut pts = Vec::new();
    for s in &sites {
        for k in 0..48u32 {
            pts.push(SpaceTimePoint {
                site_id: s.id,
                easting: s.easting_km,
                northing: s.northing_km,
                time: month_to_time(2000 + (k / 12) as i32, k % 12 + 1),
                elevation: s.elevation_km,
            });
        }
    }
    let perm = canonical_order(&pts);
    let pts: Vec<_> = perm.iter().map(|&i| pts[i]).collect();
    let graph = build_graph(&pts, 10, 2.0 / 30.0, 1.0).unwrap();
    let sigma = Matrix3::new(0.413, 0.09, -0.06, 0.09, 0.35, 0.12, -0.06, 0.12, 0.30);
    let coreg = sym_sqrt(&sigma).unwrap();
    let thetas = [
        GneitingParams { phi_sp: 0.188, phi_ti: 6.0, eta: 0.774 },
        GneitingParams { phi_sp: 0.120, phi_ti: 6.0, eta: 0.5 },
        GneitingParams { phi_sp: 0.150, phi_ti: 6.0, eta: 0.64 },
    ];
    let cached = build_weight_cache(&graph, &coreg, &thetas).unwrap();
    let plain = compute_weights_uncached(&graph, &coreg, &thetas).unwrap();
    assert!(cached.cached, "regular design was not detected");
    assert_eq!(
        cached.computed,
        10 * CACHE_SLOTS,
        "expected exactly 10 sites x {CACHE_SLOTS} computed weight sets"
    );
    for n in 0..graph.len() {
        let a = cached.at(n);
        let b = plain.at(n);
        for r in 0..3 {
            for c in 0..a.b.ncols() {
                assert!(
                    (a.b[(r, c)] - b.b[(r, c)]).abs() <= 1e-14,
                    "cached B differs at point {n} ({r},{c})"
                );
            }
            for c in 0..3 {
                assert!(
                    (a.f[(r, c)] - b.f[(r, c)]).abs() <= 1e-14,
                    "cached F differs at point {n} ({r},{c})"
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Criteria 6, 7 and 9: posterior recovery, DIC ordering and censoring
// validity on the same batch of synthetic fits.
// ---------------------------------------------------------------------------

struct RecoveryTruth {
    spec: SimulationSpec,
}

/// A generative truth jittered around the reference values, with the rain
/// intercept high enough to keep censoring mild (a few percent of records).
///
/// `extent_km` controls the station density and `sim_m` the ancestral
/// neighbor budget of the simulation. Coverage checks use a 100 km domain
/// and simulate from the same process that is fitted (the calibration
/// guarantee only holds when the fitted model is the generative one); the
/// neighbor-budget comparison uses a dense 25 km domain simulated with a
/// generous budget, so that both fitted budgets approximate a common finer
/// process and the larger one genuinely represents more of the field.
fn recovery_truth(rep: u64, extent_km: f64, sim_m: usize) -> RecoveryTruth {
    let mut rng = substream(9000 + rep, Stream::Simulate, &[99]);
    let label_cycle = [[1u32, 1, 1, 1, 1], [1, 1, 1, 1, 2], [1, 1, 1, 2, 3]];
    let sites = uniform_sites(20, extent_km, &label_cycle, 9000 + rep);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let base_sp = [0.188, 0.120, 0.150];
    let base_eta = [0.774, 0.5, 0.64];
    let base_cy = [0.617, 0.45, 0.38];
    let base_eps = [0.176, 0.12, 0.15];
    let thetas = std::array::from_fn(|i| GneitingParams {
        phi_sp: base_sp[i] * u(0.8, 1.2),
        phi_ti: 6.0 * u(0.8, 1.2),
        eta: (base_eta[i] + u(-0.05, 0.05)).clamp(0.05, 0.95),
    });
    let cyclical = std::array::from_fn(|i| CyclicalParams {
        sigma2_cy: base_cy[i] * u(0.85, 1.15),
        phi_cy: 9.76 * u(0.8, 1.2),
    });
    let sigma2_eps = std::array::from_fn(|i| base_eps[i] * u(0.85, 1.15));
    let mut sigma = Matrix3::new(0.413, 0.09, -0.06, 0.09, 0.35, 0.12, -0.06, 0.12, 0.30);
    for i in 0..3 {
        sigma[(i, i)] *= u(0.9, 1.1);
    }
    let beta: Vec<[[f64; 2]; N_RESPONSES]> = (0..3)
        .map(|l| {
            let shift = 0.1 * l as f64;
            [
                [1.7 + shift + u(-0.1, 0.1), -0.4 + u(-0.1, 0.1)],
                [shift + u(-0.2, 0.2), -0.3 + u(-0.1, 0.1)],
                [1.8 + shift + u(-0.1, 0.1), 0.2 + u(-0.1, 0.1)],
            ]
        })
        .collect();
    let params = ParameterSet { thetas, sigma, cyclical, sigma2_eps, beta };
    let spec = SimulationSpec {
        sites,
        params,
        n_months: 36,
        missing_rate: 0.05,
        m: sim_m,
        seed: 9000 + rep,
        ..Default::default()
    };
    RecoveryTruth { spec }
}

/// Central 95% interval from sorted draws.
fn interval(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| {
        let x = p * (v.len() - 1) as f64;
        let lo = x.floor() as usize;
        let hi = x.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
    };
    (q(0.025), q(0.975))
}

/// Truth expressed on the scale of the transform the fit derives from the
/// data, so fitted and generative parameters are directly comparable.
struct ScaledTruth {
    r: [f64; N_RESPONSES],
    fit_transform: TransformSpec,
}

impl ScaledTruth {
    fn new(sim: &TransformSpec, fit: &TransformSpec) -> ScaledTruth {
        ScaledTruth {
            r: [
                sim.rain_scale / fit.rain_scale,
                sim.tmin_scale / fit.tmin_scale,
                sim.range_scale / fit.range_scale,
            ],
            fit_transform: *fit,
        }
    }

    fn variance(&self, i: usize, v: f64) -> f64 {
        v * self.r[i] * self.r[i]
    }

    fn beta(&self, sim: &TransformSpec, i: usize, b: &[f64; 2]) -> [f64; 2] {
        match i {
            1 => [
                (sim.tmin_center + sim.tmin_scale * b[0] - self.fit_transform.tmin_center)
                    / self.fit_transform.tmin_scale,
                b[1] * self.r[1],
            ],
            _ => [b[0] * self.r[i], b[1] * self.r[i]],
        }
    }
}

#[derive(Default)]
struct Coverage {
    hits: usize,
    total: usize,
}

impl Coverage {
    fn tally(&mut self, truth: f64, ci: (f64, f64)) {
        self.total += 1;
        if truth >= ci.0 && truth <= ci.1 {
            self.hits += 1;
        }
    }
    fn rate(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

/// Criterion 9's archive-side checks for one fit.
fn assert_archive_physically_valid(
    archive: &climgp::inference::PosteriorArchive,
    out: &SimulationOutput,
) {
    let state = LatentState::init(&out.data, &archive.transform, archive.labels.len()).unwrap();
    for (d, latent) in archive.latent.iter().enumerate() {
        for (p, y) in latent.y.iter().enumerate() {
            for i in 0..N_RESPONSES {
                if state.flags[p][i] == ObsFlag::Censored {
                    assert!(
                        y[i] <= 0.0,
                        "draw {d} point {p} response {i}: censored latent {} > 0",
                        y[i]
                    );
                }
            }
            let (rain, tmin, tmax) = decode_latent(y, &archive.transform);
            assert!(rain >= 0.0, "draw {d} point {p}: decoded rain {rain} < 0");
            assert!(tmax >= tmin, "draw {d} point {p}: decoded tmax {tmax} < tmin {tmin}");
        }
    }
}

#[test]
fn criterion_06_07_09_posterior_recovery_dic_direction_and_censoring() {
    let n_reps = 20u64;
    let n_dic_reps = 10u64;
    let mut cov_beta = Coverage::default();
    let mut cov_eps = Coverage::default();
    let mut cov_cy = Coverage::default();
    let mut cov_phicy = Coverage::default();
    let mut cov_eta = Coverage::default();
    let mut dic_wins = 0usize;

    let base_config = SamplerConfig {
        iterations: 5000,
        burn_in: 2500,
        thin: 10,
        m: 10,
        tier: 5,
        seed: 0,
        adapt_window: 50,
        store_latent: true,
        ..Default::default()
    };

    for rep in 0..n_reps {
        let truth = recovery_truth(rep, 100.0, 10);
        let out = simulate(&truth.spec).unwrap();
        let config = SamplerConfig { seed: 9000 + rep, ..base_config.clone() };
        let archive = run_chain(&out.data, &config, &Priors::default()).unwrap();
        assert_archive_physically_valid(&archive, &out);

        let scaled = ScaledTruth::new(&truth.spec.transform, &archive.transform);
        let sim = &truth.spec;
        let draws = &archive.draws;
        for i in 0..N_RESPONSES {
            cov_eps.tally(
                scaled.variance(i, sim.params.sigma2_eps[i]),
                interval(draws.iter().map(|d| d.sigma2_eps[i]).collect()),
            );
            cov_cy.tally(
                scaled.variance(i, sim.params.cyclical[i].sigma2_cy),
                interval(draws.iter().map(|d| d.cyclical[i].sigma2_cy).collect()),
            );
            cov_phicy.tally(
                sim.params.cyclical[i].phi_cy,
                interval(draws.iter().map(|d| d.cyclical[i].phi_cy).collect()),
            );
            cov_eta.tally(
                sim.params.thetas[i].eta,
                interval(draws.iter().map(|d| d.thetas[i].eta).collect()),
            );
            for (lab, b) in sim.params.beta.iter().enumerate() {
                let bt = scaled.beta(&sim.transform, i, &b[i]);
                for k in 0..2 {
                    cov_beta
                        .tally(bt[k], interval(draws.iter().map(|d| d.beta[lab][i][k]).collect()));
                }
            }
        }

    }

    // Neighbor-budget comparison on the dense design.
    for rep in 0..n_dic_reps {
        let truth = recovery_truth(rep, 25.0, 50);
        let out = simulate(&truth.spec).unwrap();
        let config10 = SamplerConfig { seed: 9000 + rep, ..base_config.clone() };
        let config20 = SamplerConfig { m: 20, ..config10.clone() };
        let archive10 = run_chain(&out.data, &config10, &Priors::default()).unwrap();
        let archive20 = run_chain(&out.data, &config20, &Priors::default()).unwrap();
        assert_archive_physically_valid(&archive10, &out);
        assert_archive_physically_valid(&archive20, &out);
        let d10 = dic(&archive10, &out.data).unwrap();
        let d20 = dic(&archive20, &out.data).unwrap();
        if d20.dic <= d10.dic {
            dic_wins += 1;
        }
        println!("replicate {rep}: DIC m=10 {:.2}, m=20 {:.2}", d10.dic, d20.dic);
    }

    for (name, cov) in [
        ("beta", &cov_beta),
        ("sigma2_eps", &cov_eps),
        ("sigma2_cy", &cov_cy),
        ("phi_cy", &cov_phicy),
        ("eta", &cov_eta),
    ] {
        println!("coverage {name}: {}/{} = {:.3}", cov.hits, cov.total, cov.rate());
        assert!(
            (0.85..=1.0).contains(&cov.rate()),
            "95% interval coverage for {name} is {:.3} ({} of {}), outside [0.85, 1.0]",
            cov.rate(),
            cov.hits,
            cov.total
        );
    }
    println!("DIC(m=20) <= DIC(m=10) in {dic_wins}/{n_dic_reps} replicates");
    assert!(dic_wins >= 7, "DIC(m=20) <= DIC(m=10) in only {dic_wins} of {n_dic_reps} replicates");
}

// ---------------------------------------------------------------------------
// Criterion 8: prediction oracle against dense kriging, with criterion 9's
// decoded-prediction checks.
// ---------------------------------------------------------------------------

fn oracle_sites() -> Vec<Site> {
    vec![
        Site {
            id: 1,
            easting_km: 0.0,
            northing_km: 0.0,
            elevation_km: 0.2,
            labels: [1, 1, 1, 1, 1],
        },
        Site {
            id: 2,
            easting_km: 8.0,
            northing_km: 3.0,
            elevation_km: 0.7,
            labels: [1, 1, 1, 1, 1],
        },
        Site {
            id: 3,
            easting_km: 3.0,
            northing_km: 9.0,
            elevation_km: 1.1,
            labels: [1, 1, 1, 1, 1],
        },
        Site {
            id: 4,
            easting_km: 12.0,
            northing_km: 11.0,
            elevation_km: 1.5,
            labels: [1, 1, 1, 1, 1],
        },
        Site {
            id: 5,
            easting_km: 6.0,
            northing_km: 15.0,
            elevation_km: 0.9,
            labels: [1, 1, 1, 1, 1],
        },
    ]
}

#[test]
fn criterion_08_09_prediction_matches_dense_kriging() {
    let params = ParameterSet {
        thetas: [
            GneitingParams { phi_sp: 0.188, phi_ti: 6.0, eta: 0.774 },
            GneitingParams { phi_sp: 0.120, phi_ti: 6.0, eta: 0.5 },
            GneitingParams { phi_sp: 0.150, phi_ti: 6.0, eta: 0.64 },
        ],
        sigma: Matrix3::new(0.413, 0.09, -0.06, 0.09, 0.35, 0.12, -0.06, 0.12, 0.30),
        cyclical: [
            CyclicalParams { sigma2_cy: 0.617, phi_cy: 9.76 },
            CyclicalParams { sigma2_cy: 0.45, phi_cy: 9.76 },
            CyclicalParams { sigma2_cy: 0.38, phi_cy: 9.76 },
        ],
        sigma2_eps: [0.176, 0.12, 0.15],
        beta: vec![[[2.0, -0.4], [0.0, -0.3], [1.8, 0.2]]],
    };
    let spec = SimulationSpec {
        sites: oracle_sites(),
        params,
        n_months: 12,
        missing_rate: 0.0,
        seed: 88,
        ..Default::default()
    };
    let out = simulate(&spec).unwrap();
    let n_obs = out.data.n_points();
    assert_eq!(n_obs, 60);

    // Archive of identical truth draws, with a neighbor budget large enough
    // that the sequential prediction conditions on every point.
    let n_draws = 2000;
    let labels = vec![1u32];
    let config = SamplerConfig {
        iterations: 2 * n_draws,
        burn_in: n_draws,
        thin: 1,
        m: n_obs + 11,
        tier: spec.tier,
        seed: spec.seed,
        space_weight: spec.space_weight,
        period: spec.period,
        ..Default::default()
    };
    let mut archive = climgp::inference::PosteriorArchive::new(
        config,
        Priors::default(),
        spec.transform,
        labels,
        spec.sites.len(),
        n_obs,
    );
    for _ in 0..n_draws {
        archive.push(
            spec.params.clone(),
            0.0,
            Some(climgp::inference::LatentDraw {
                omega: out.omega.clone(),
                lambda: out.lambda.clone(),
                y: out.latent.clone(),
            }),
        );
    }

    let grid = Site {
        id: 50,
        easting_km: 5.5,
        northing_km: 6.5,
        elevation_km: 0.8,
        labels: [1, 1, 1, 1, 1],
    };
    let task = PredictionTask {
        grid_sites: vec![grid.clone()],
        start_year: spec.start_year,
        n_months: 12,
        draw_subsample: 0,
    };
    let res = predict_series(&task, &archive, &out.data).unwrap();
    assert_eq!(res.points.len(), 12);

    // Dense kriging oracle: joint covariance over observed + grid points,
    // conditional of each grid month given all observed values.
    let coreg = sym_sqrt(&spec.params.sigma).unwrap();
    let grid_pts: Vec<SpaceTimePoint> = (1..=12u32)
        .map(|mo| SpaceTimePoint {
            site_id: grid.id,
            easting: grid.easting_km,
            northing: grid.northing_km,
            time: month_to_time(spec.start_year, mo),
            elevation: grid.elevation_km,
        })
        .collect();
    let mut all = out.data.points.clone();
    all.extend(grid_pts.iter().cloned());
    let cov =
        joint_covariance(&all, &coreg, &spec.params.thetas, spec.period, 3 * all.len()).unwrap();
    let d_obs = 3 * n_obs;
    let c_oo = cov.view((0, 0), (d_obs, d_obs)).into_owned();
    let c_oo_chol = c_oo.cholesky().unwrap();
    let mut w_obs = DVector::zeros(d_obs);
    for (p, o) in out.omega.iter().enumerate() {
        for a in 0..3 {
            w_obs[3 * p + a] = o[a];
        }
    }
    let solved = c_oo_chol.solve(&w_obs);

    let mut n_cells = 0usize;
    let mut within_2se = 0usize;
    for (j, pred) in res.points.iter().enumerate() {
        let row0 = d_obs + 3 * j;
        let c_go = cov.view((row0, 0), (3, d_obs)).into_owned();
        let c_gg = cov.view((row0, row0), (3, 3)).into_owned();
        let krig_mean = &c_go * &solved;
        let krig_cov = &c_gg - &c_go * c_oo_chol.solve(&c_go.transpose());
        for i in 0..N_RESPONSES {
            let mean_expect = spec.params.beta[0][i][0]
                + spec.params.beta[0][i][1] * grid.elevation_km
                + krig_mean[i];
            let var_expect =
                krig_cov[(i, i)] + spec.params.cyclical[i].sigma2_cy + spec.params.sigma2_eps[i];
            let got_mean = pred.model[i].mean;
            let got_var = pred.model[i].sd * pred.model[i].sd;
            let se_mean = var_expect.sqrt() / (n_draws as f64).sqrt();
            let se_var = var_expect * (2.0 / (n_draws as f64 - 1.0)).sqrt();
            // Individual cells are judged at 2 MC standard errors; with 72
            // standard-normal discrepancies a few land between 2 and 3 by
            // chance, so the 2-SE rate is checked in aggregate below and
            // each cell gets a hard 3.2-SE cap (a formula error would blow
            // far past that).
            let z_mean = (got_mean - mean_expect) / se_mean;
            let z_var = (got_var - var_expect) / se_var;
            for (what, z) in [("mean", z_mean), ("variance", z_var)] {
                n_cells += 1;
                if z.abs() <= 2.0 {
                    within_2se += 1;
                }
                assert!(
                    z.abs() <= 3.2,
                    "month {j} response {i}: {what} off by {z:.2} MC standard errors"
                );
            }
        }
        // Criterion 9 on the decoded side: physical summaries must respect
        // the support of each variable.
        let rain = &pred.physical[0];
        assert!(rain.mean >= 0.0 && rain.q025 >= 0.0, "month {j}: negative decoded rain");
        assert!(
            pred.physical[2].mean >= pred.physical[1].mean,
            "month {j}: decoded tmax below tmin"
        );
    }
    let rate = within_2se as f64 / n_cells as f64;
    assert!(
        rate >= 0.85,
        "only {within_2se}/{n_cells} predictive cells within 2 MC standard errors"
    );
}
