//! Nearest-Neighbor Gaussian Process machinery: neighbor-set construction
//! under the combined space-time distance, the annual-cycle boundary rule,
//! conditional Gaussian parameters (B_n, F_n) with the 13-slot per-site
//! cache, and the approximate joint log-density of the latent field.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariance::{cross_cov_block, Coregionalization, GneitingParams};
use crate::spacetime::{canonical_order, combined_distance_unchecked, lag, SpaceTimePoint};
use crate::{Error, Result, N_RESPONSES};

/// Number of leading time steps whose kriging weights must be computed
/// explicitly on a regular monthly design; later steps repeat slot 13.
pub const CACHE_SLOTS: usize = 13;

/// Tolerance for matching "same month, previous year" times, in years.
const MONTH_EPS: f64 = 1e-6;

/// Neighbor sets over the canonically ordered design.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    /// Ordered points (canonical order already applied).
    pub points: Vec<SpaceTimePoint>,
    /// Per ordered point n, the sorted indices of its at most m neighbors,
    /// all strictly preceding n.
    pub neighbors: Vec<Vec<usize>>,
    /// For each point n, the list of (successor n', slot of n inside
    /// neighbors[n']) pairs; used by the Gibbs full conditionals of omega.
    pub co_neighbors: Vec<Vec<(usize, usize)>>,
    pub m: usize,
    pub space_weight: f64,
    pub period: f64,
    /// Regular-design layout (sites per time step, time steps), when the
    /// design is a fixed station set observed at every time step.
    pub regular: Option<RegularDesign>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegularDesign {
    pub n_sites: usize,
    pub n_times: usize,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Empirical composition of the neighbor sets: mean fractions of
    /// neighbors sharing the point's time step and its spatial location.
    pub fn neighbor_composition(&self) -> (f64, f64) {
        let mut same_time = 0usize;
        let mut same_site = 0usize;
        let mut total = 0usize;
        for (n, nbrs) in self.neighbors.iter().enumerate() {
            for &q in nbrs {
                let p = &self.points[n];
                let o = &self.points[q];
                if (p.time - o.time).abs() < MONTH_EPS {
                    same_time += 1;
                }
                if p.easting == o.easting && p.northing == o.northing {
                    same_site += 1;
                }
                total += 1;
            }
        }
        if total == 0 {
            (0.0, 0.0)
        } else {
            (same_time as f64 / total as f64, same_site as f64 / total as f64)
        }
    }
}

fn is_canonically_ordered(points: &[SpaceTimePoint]) -> bool {
    canonical_order(points).iter().enumerate().all(|(r, &i)| r == i)
}

fn detect_regular(points: &[SpaceTimePoint]) -> Option<RegularDesign> {
    let n = points.len();
    if n == 0 {
        return None;
    }
    let t0 = points[0].time;
    let n_sites = points.iter().take_while(|p| (p.time - t0).abs() < MONTH_EPS).count();
    if n_sites == 0 || !n.is_multiple_of(n_sites) {
        return None;
    }
    let n_times = n / n_sites;
    // Every time block must list the same sites in the same order, at a
    // common monthly cadence.
    for ti in 0..n_times {
        let t = points[ti * n_sites].time;
        for si in 0..n_sites {
            let p = &points[ti * n_sites + si];
            let base = &points[si];
            if (p.time - t).abs() > MONTH_EPS
                || p.site_id != base.site_id
                || p.easting != base.easting
                || p.northing != base.northing
            {
                return None;
            }
        }
        if ti > 0 {
            let dt = t - points[(ti - 1) * n_sites].time;
            if (dt - 1.0 / 12.0).abs() > MONTH_EPS {
                return None;
            }
        }
    }
    Some(RegularDesign { n_sites, n_times })
}

/// Exact m-nearest earlier points under the combined distance, with the
/// annual-cycle boundary modification. `points` must already be in
/// canonical order.
pub fn build_graph(
    points: &[SpaceTimePoint],
    m: usize,
    space_weight: f64,
    period: f64,
) -> Result<NeighborGraph> {
    if points.is_empty() {
        return Err(Error::Config("cannot build a neighbor graph on no points".into()));
    }
    if m == 0 {
        return Err(Error::Config("neighbor budget m must be >= 1".into()));
    }
    if !(space_weight > 0.0) {
        return Err(Error::Config("space_weight must be positive".into()));
    }
    if !is_canonically_ordered(points) {
        return Err(Error::Config("points must be in canonical order".into()));
    }

    // Per-site index lists, used by the boundary rule.
    let mut site_points: std::collections::HashMap<u32, Vec<usize>> = Default::default();
    for (i, p) in points.iter().enumerate() {
        site_points.entry(p.site_id).or_default().push(i);
    }

    let n = points.len();
    let mut neighbors = Vec::with_capacity(n);
    // Scratch set of (distance, index) candidates, at most m entries.
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m + 2);
    for i in 0..n {
        cand.clear();
        let p = &points[i];
        // Backward scan with time pruning: the ordering is time-primary, so
        // once h_t alone exceeds the current worst distance no earlier point
        // can enter the set.
        let mut worst = f64::INFINITY;
        for q in (0..i).rev() {
            let o = &points[q];
            let h_t = crate::spacetime::snap_to_months(p.time - o.time);
            if cand.len() == m && h_t > worst {
                break;
            }
            let h_s = (p.easting - o.easting).hypot(p.northing - o.northing);
            let d = combined_distance_unchecked(h_s, h_t, space_weight);
            if cand.len() < m {
                cand.push((d, q));
                if cand.len() == m {
                    worst = worst_of(&cand).0;
                }
            } else {
                let (wd, wslot) = worst_of_slot(&cand);
                // Equal distances keep the earlier candidate: the lower
                // ordered index wins, and the backward scan visits lower
                // indices later, so strict improvement is required except
                // when the tie is against a higher index.
                if d < wd || (d == wd && q < cand[wslot].1) {
                    cand[wslot] = (d, q);
                    worst = worst_of(&cand).0;
                }
            }
        }

        // Boundary rule: force the same-site points one year back at
        // circular month-lags 0 and 1 (e.g. Jan 1999 and Feb 1999 for
        // Jan 2000), displacing the farthest non-forced members.
        let mut forced: Vec<usize> = Vec::new();
        if let Some(list) = site_points.get(&p.site_id) {
            for target in [p.time - period, p.time - period + period / 12.0] {
                if let Some(&idx) =
                    list.iter().find(|&&j| j < i && (points[j].time - target).abs() < MONTH_EPS)
                {
                    forced.push(idx);
                }
            }
        }
        for f in forced.iter() {
            if cand.iter().any(|&(_, q)| q == *f) {
                continue;
            }
            let h_s = (p.easting - points[*f].easting).hypot(p.northing - points[*f].northing);
            let h_t = p.time - points[*f].time;
            let d = combined_distance_unchecked(h_s, h_t, space_weight);
            if cand.len() < m {
                cand.push((d, *f));
            } else if let Some(slot) = worst_displaceable(&cand, &forced) {
                cand[slot] = (d, *f);
            }
        }

        let mut idxs: Vec<usize> = cand.iter().map(|&(_, q)| q).collect();
        idxs.sort_unstable();
        neighbors.push(idxs);
    }

    let mut co_neighbors: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (i, nbrs) in neighbors.iter().enumerate() {
        for (slot, &q) in nbrs.iter().enumerate() {
            co_neighbors[q].push((i, slot));
        }
    }

    Ok(NeighborGraph {
        regular: detect_regular(points),
        points: points.to_vec(),
        neighbors,
        co_neighbors,
        m,
        space_weight,
        period,
    })
}

fn worst_of(cand: &[(f64, usize)]) -> (f64, usize) {
    cand[worst_of_slot(cand).1]
}

/// Slot of the worst candidate: largest distance, ties to the larger index.
fn worst_of_slot(cand: &[(f64, usize)]) -> (f64, usize) {
    let mut slot = 0;
    for (k, &(d, q)) in cand.iter().enumerate() {
        let (wd, wq) = cand[slot];
        if d > wd || (d == wd && q > wq) {
            slot = k;
        }
    }
    (cand[slot].0, slot)
}

fn worst_displaceable(cand: &[(f64, usize)], forced: &[usize]) -> Option<usize> {
    let mut slot: Option<usize> = None;
    for (k, &(d, q)) in cand.iter().enumerate() {
        if forced.contains(&q) {
            continue;
        }
        match slot {
            None => slot = Some(k),
            Some(s) => {
                let (wd, wq) = cand[s];
                if d > wd || (d == wd && q > wq) {
                    slot = Some(k);
                }
            }
        }
    }
    slot
}

/// Conditional Gaussian parameters of one point given its neighbors.
#[derive(Debug, Clone)]
pub struct KrigingWeights {
    /// 3 x 3k conditional-mean operator B_n.
    pub b: DMatrix<f64>,
    /// 3 x 3 conditional covariance F_n.
    pub f: Matrix3<f64>,
    /// Lower Cholesky factor of F_n.
    pub f_chol: Matrix3<f64>,
    /// Inverse of F_n.
    pub f_inv: Matrix3<f64>,
    pub ln_det_f: f64,
}

const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

fn chol_with_jitter(
    mut m: DMatrix<f64>,
    scale: f64,
) -> Option<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    for &j in &JITTER_LADDER {
        let jit = j * scale;
        if j > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jit;
            }
        }
        if let Some(ch) = m.clone().cholesky() {
            return Some((ch, jit));
        }
    }
    None
}

fn chol3_with_jitter(f: Matrix3<f64>, scale: f64) -> Option<Matrix3<f64>> {
    let mut f = (f + f.transpose()) * 0.5;
    for &j in &JITTER_LADDER {
        if j > 0.0 {
            for i in 0..3 {
                f[(i, i)] += j * scale;
            }
        }
        if let Some(ch) = f.cholesky() {
            return Some(ch.l());
        }
    }
    None
}

/// B_n = C(n, nbrs) C(nbrs, nbrs)^-1 and F_n = Sigma - B_n C(nbrs, n).
pub fn kriging_weights(
    point: &SpaceTimePoint,
    nbrs: &[SpaceTimePoint],
    coreg: &Coregionalization,
    thetas: &[GneitingParams; N_RESPONSES],
    period: f64,
) -> Result<KrigingWeights> {
    let k = nbrs.len();
    if k == 0 {
        let f = coreg.sigma;
        let chol = f
            .cholesky()
            .ok_or_else(|| Error::Numerical("sigma is not positive definite".into()))?;
        let l = chol.l();
        let ln_det_f = 2.0 * (0..3).map(|i| l[(i, i)].ln()).sum::<f64>();
        return Ok(KrigingWeights {
            b: DMatrix::zeros(N_RESPONSES, 0),
            f,
            f_chol: l,
            f_inv: chol.inverse(),
            ln_det_f,
        });
    }
    let dim = N_RESPONSES * k;
    let mut c_nn = DMatrix::zeros(dim, dim);
    for l in 0..k {
        for q in l..k {
            let block = cross_cov_block(&lag(&nbrs[l], &nbrs[q], period), coreg, thetas);
            for a in 0..N_RESPONSES {
                for b in 0..N_RESPONSES {
                    c_nn[(3 * l + a, 3 * q + b)] = block[(a, b)];
                    c_nn[(3 * q + b, 3 * l + a)] = block[(a, b)];
                }
            }
        }
    }
    let mut c_cross = DMatrix::zeros(dim, N_RESPONSES);
    for l in 0..k {
        let block = cross_cov_block(&lag(&nbrs[l], point, period), coreg, thetas);
        for a in 0..N_RESPONSES {
            for b in 0..N_RESPONSES {
                // block is Cov(omega_nbr, omega_point).
                c_cross[(3 * l + a, b)] = block[(a, b)];
            }
        }
    }
    let scale = c_nn.diagonal().mean();
    let (chol, _) = chol_with_jitter(c_nn, scale).ok_or_else(|| {
        Error::Numerical(format!(
            "singular neighbor covariance at point (site {}, t {:.4}) after maximum jitter",
            point.site_id, point.time
        ))
    })?;
    let solved = chol.solve(&c_cross); // C_nn^-1 C(nbrs, n), dim x 3
    let b = solved.transpose(); // 3 x 3k
    let f_dyn = &b * &c_cross;
    let mut f = coreg.sigma;
    for a in 0..N_RESPONSES {
        for bb in 0..N_RESPONSES {
            f[(a, bb)] -= f_dyn[(a, bb)];
        }
    }
    let f = (f + f.transpose()) * 0.5;
    let f_chol = chol3_with_jitter(f, coreg.sigma.trace() / 3.0).ok_or_else(|| {
        Error::Numerical(format!(
            "conditional covariance not positive definite at point (site {}, t {:.4})",
            point.site_id, point.time
        ))
    })?;
    let ln_det_f = 2.0 * (0..3).map(|i| f_chol[(i, i)].ln()).sum::<f64>();
    // Rebuild F from the (possibly jittered) factor so F and its factor agree.
    let f = f_chol * f_chol.transpose();
    let f_inv = f
        .cholesky()
        .ok_or_else(|| Error::Numerical("conditional covariance lost definiteness".into()))?
        .inverse();
    Ok(KrigingWeights { b, f, f_chol, f_inv, ln_det_f })
}

/// Kriging weights for every point of a graph, with the per-site 13-slot
/// cache on regular designs.
#[derive(Debug, Clone)]
pub struct WeightSet {
    /// Per ordered point, index into `store`.
    pub slot: Vec<usize>,
    pub store: Vec<KrigingWeights>,
    /// Number of kriging solves actually performed.
    pub computed: usize,
    /// Whether the 13-slot cache was active.
    pub cached: bool,
}

impl WeightSet {
    #[inline]
    pub fn at(&self, n: usize) -> &KrigingWeights {
        &self.store[self.slot[n]]
    }

    pub fn cache_hit_ratio(&self) -> f64 {
        if self.slot.is_empty() {
            0.0
        } else {
            1.0 - self.computed as f64 / self.slot.len() as f64
        }
    }
}

/// Compute weights for every point, one solve per point.
pub fn compute_weights_uncached(
    graph: &NeighborGraph,
    coreg: &Coregionalization,
    thetas: &[GneitingParams; N_RESPONSES],
) -> Result<WeightSet> {
    let n = graph.len();
    let mut store = Vec::with_capacity(n);
    for i in 0..n {
        let nbrs: Vec<SpaceTimePoint> =
            graph.neighbors[i].iter().map(|&q| graph.points[q]).collect();
        store.push(kriging_weights(&graph.points[i], &nbrs, coreg, thetas, graph.period)?);
    }
    Ok(WeightSet { slot: (0..n).collect(), store, computed: n, cached: false })
}

/// Compute weights exploiting the regular-design repetition: on a fixed
/// station set observed every month, the neighbor lag geometry of a site
/// repeats from the 13th time step onwards, so only sites x 13 solves are
/// needed. Falls back to per-point computation whenever the repetition does
/// not actually hold for a point.
pub fn build_weight_cache(
    graph: &NeighborGraph,
    coreg: &Coregionalization,
    thetas: &[GneitingParams; N_RESPONSES],
) -> Result<WeightSet> {
    let reg = match graph.regular {
        Some(r) if r.n_times > CACHE_SLOTS => r,
        _ => return compute_weights_uncached(graph, coreg, thetas),
    };
    let s = reg.n_sites;
    let n = graph.len();
    let mut store: Vec<KrigingWeights> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    // Slot table: site-major, CACHE_SLOTS entries per site.
    let mut ref_slot = vec![usize::MAX; s * CACHE_SLOTS];
    for ti in 0..CACHE_SLOTS.min(reg.n_times) {
        for si in 0..s {
            let i = ti * s + si;
            let nbrs: Vec<SpaceTimePoint> =
                graph.neighbors[i].iter().map(|&q| graph.points[q]).collect();
            store.push(kriging_weights(&graph.points[i], &nbrs, coreg, thetas, graph.period)?);
            slot[i] = store.len() - 1;
            ref_slot[si * CACHE_SLOTS + ti] = store.len() - 1;
        }
    }
    let mut computed = store.len();
    for ti in CACHE_SLOTS..reg.n_times {
        let shift = (ti - (CACHE_SLOTS - 1)) * s;
        for si in 0..s {
            let i = ti * s + si;
            let ref_i = (CACHE_SLOTS - 1) * s + si;
            // Reuse is valid only when the neighbor set is the reference
            // set shifted in time; otherwise compute this point exactly.
            let same_geometry = graph.neighbors[i].len() == graph.neighbors[ref_i].len()
                && graph.neighbors[i]
                    .iter()
                    .zip(graph.neighbors[ref_i].iter())
                    .all(|(&a, &b)| a == b + shift);
            if same_geometry {
                slot[i] = ref_slot[si * CACHE_SLOTS + CACHE_SLOTS - 1];
            } else {
                let nbrs: Vec<SpaceTimePoint> =
                    graph.neighbors[i].iter().map(|&q| graph.points[q]).collect();
                store.push(kriging_weights(&graph.points[i], &nbrs, coreg, thetas, graph.period)?);
                slot[i] = store.len() - 1;
                computed += 1;
            }
        }
    }
    Ok(WeightSet { slot, store, computed, cached: true })
}

const LN_2PI: f64 = 1.8378770664093453;

/// Conditional weights of a single unit-variance latent component given its
/// neighbors, at every ordered point. Because the coregionalization acts
/// pointwise, the whitened components w = A^-1 omega are independent scalar
/// fields on the same neighbor graph; these weights are their per-point
/// conditional means and standard deviations.
#[derive(Debug, Clone)]
pub struct ScalarWeightSet {
    /// Per point, the conditional-mean coefficients over its neighbors.
    pub b: Vec<Vec<f64>>,
    /// Per point, the conditional standard deviation.
    pub sqrt_f: Vec<f64>,
}

/// Scalar kriging weights for one component under a unit-variance Gneiting
/// correlation: b_n = R^-1 r and f_n = 1 - r' b_n at every point.
pub fn scalar_weight_set(graph: &NeighborGraph, theta: &GneitingParams) -> Result<ScalarWeightSet> {
    let n = graph.len();
    let mut b = Vec::with_capacity(n);
    let mut sqrt_f = Vec::with_capacity(n);
    for i in 0..n {
        let nbrs = &graph.neighbors[i];
        let k = nbrs.len();
        if k == 0 {
            b.push(Vec::new());
            sqrt_f.push(1.0);
            continue;
        }
        let p = &graph.points[i];
        let mut big_r = DMatrix::identity(k, k);
        for l in 0..k {
            for q in (l + 1)..k {
                let c = crate::covariance::gneiting_corr(
                    &lag(&graph.points[nbrs[l]], &graph.points[nbrs[q]], graph.period),
                    theta,
                );
                big_r[(l, q)] = c;
                big_r[(q, l)] = c;
            }
        }
        let r = DVector::from_fn(k, |l, _| {
            crate::covariance::gneiting_corr(&lag(&graph.points[nbrs[l]], p, graph.period), theta)
        });
        let (chol, _) = chol_with_jitter(big_r, 1.0).ok_or_else(|| {
            Error::Numerical(format!(
                "singular scalar neighbor correlation at point (site {}, t {:.4})",
                p.site_id, p.time
            ))
        })?;
        let bi = chol.solve(&r);
        let f = (1.0 - r.dot(&bi)).max(1e-12);
        b.push(bi.iter().copied().collect());
        sqrt_f.push(f.sqrt());
    }
    Ok(ScalarWeightSet { b, sqrt_f })
}

/// Map one component field to its whitened innovations,
/// v_n = (w_n - b_n . w_nbrs) / sqrt(f_n).
pub fn whiten_component(w: &[f64], graph: &NeighborGraph, sw: &ScalarWeightSet) -> Vec<f64> {
    (0..graph.len())
        .map(|n| {
            let mean: f64 =
                graph.neighbors[n].iter().zip(&sw.b[n]).map(|(&q, &c)| c * w[q]).sum();
            (w[n] - mean) / sw.sqrt_f[n]
        })
        .collect()
}

/// Inverse of `whiten_component`: rebuild the field forward in the canonical
/// order (neighbors strictly precede each point).
pub fn color_component(v: &[f64], graph: &NeighborGraph, sw: &ScalarWeightSet) -> Vec<f64> {
    let mut w = vec![0.0; graph.len()];
    for n in 0..graph.len() {
        let mean: f64 = graph.neighbors[n].iter().zip(&sw.b[n]).map(|(&q, &c)| c * w[q]).sum();
        w[n] = mean + sw.sqrt_f[n] * v[n];
    }
    w
}

/// Log-density of one point's conditional factor.
#[inline]
fn factor_logpdf(w: &KrigingWeights, omega_n: &Vector3<f64>, nbr_vals: &DVector<f64>) -> f64 {
    let mean = if nbr_vals.is_empty() {
        Vector3::zeros()
    } else {
        let m = &w.b * nbr_vals;
        Vector3::new(m[0], m[1], m[2])
    };
    let r = omega_n - mean;
    // Solve L z = r, quadratic form = |z|^2.
    let z = w.f_chol.solve_lower_triangular(&r).expect("Cholesky factor is nonsingular");
    -0.5 * (3.0 * LN_2PI + w.ln_det_f + z.norm_squared())
}

/// NNGP joint log-density sum_n log phi3(omega_n | B_n Omega_n(m), F_n).
/// `omega` holds the 3-vector at every ordered point.
pub fn nngp_logdensity(
    omega: &[Vector3<f64>],
    graph: &NeighborGraph,
    weights: &WeightSet,
) -> Result<f64> {
    if omega.len() != graph.len() {
        return Err(Error::Config(format!(
            "omega has {} points but the graph has {}",
            omega.len(),
            graph.len()
        )));
    }
    let mut total = 0.0;
    let mut nbr_vals = DVector::zeros(3 * graph.m);
    for n in 0..graph.len() {
        let nbrs = &graph.neighbors[n];
        let k = nbrs.len();
        for (j, &q) in nbrs.iter().enumerate() {
            nbr_vals[3 * j] = omega[q][0];
            nbr_vals[3 * j + 1] = omega[q][1];
            nbr_vals[3 * j + 2] = omega[q][2];
        }
        let vals = nbr_vals.rows(0, 3 * k).into_owned();
        total += factor_logpdf(weights.at(n), &omega[n], &vals);
    }
    Ok(total)
}

/// Draw omega_n | neighbors: B_n values + chol(F_n) z.
pub fn conditional_draw(
    weights: &KrigingWeights,
    neighbor_values: &DVector<f64>,
    rng: &mut impl Rng,
) -> Vector3<f64> {
    let mean = if neighbor_values.is_empty() {
        Vector3::zeros()
    } else {
        let m = &weights.b * neighbor_values;
        Vector3::new(m[0], m[1], m[2])
    };
    let z = Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    mean + weights.f_chol * z
}

/// Dense precision implied by the NNGP factorization,
/// Q = (I - B)' F^-1 (I - B); the exact density of the approximation.
/// Only for desk-scale diagnostics (KL, exactness checks).
pub fn implied_precision(
    graph: &NeighborGraph,
    weights: &WeightSet,
    dense_limit: usize,
) -> Result<DMatrix<f64>> {
    let rows = 3 * graph.len();
    if rows > dense_limit {
        return Err(Error::DenseLimit(rows, dense_limit));
    }
    let mut i_minus_b = DMatrix::identity(rows, rows);
    let mut f_inv_rows = DMatrix::zeros(rows, rows);
    for n in 0..graph.len() {
        let w = weights.at(n);
        for (j, &q) in graph.neighbors[n].iter().enumerate() {
            for a in 0..3 {
                for b in 0..3 {
                    i_minus_b[(3 * n + a, 3 * q + b)] = -w.b[(a, 3 * j + b)];
                }
            }
        }
        let f_inv =
            w.f.try_inverse()
                .ok_or_else(|| Error::Numerical("singular conditional covariance".into()))?;
        for a in 0..3 {
            for b in 0..3 {
                f_inv_rows[(3 * n + a, 3 * n + b)] = f_inv[(a, b)];
            }
        }
    }
    Ok(i_minus_b.transpose() * f_inv_rows * i_minus_b)
}
