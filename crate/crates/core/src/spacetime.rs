//! Space-time coordinates, lags, the circular annual representation, the
//! heuristic combined distance and the canonical point ordering.
//!
//! Coordinates are planar kilometers (data must be pre-projected) and time
//! is continuous in years, with month `j` of year `y` mapped to the
//! mid-month instant `y + (j - 0.5) / 12`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default period of the annual cycle, in years.
pub const DEFAULT_PERIOD: f64 = 1.0;

/// Default weight applied to the spatial lag (km) when combining it with the
/// temporal lag (years) into a single distance: sqrt((h_s * 2/30)^2 + h_t^2).
pub const DEFAULT_SPACE_WEIGHT: f64 = 2.0 / 30.0;

/// A point of the monitoring design: a station at a monthly instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimePoint {
    pub site_id: u32,
    /// Easting, km.
    pub easting: f64,
    /// Northing, km.
    pub northing: f64,
    /// Continuous time, years.
    pub time: f64,
    /// Elevation, km.
    pub elevation: f64,
}

impl SpaceTimePoint {
    pub fn is_valid(&self) -> bool {
        self.easting.is_finite()
            && self.northing.is_finite()
            && self.time.is_finite()
            && self.elevation.is_finite()
    }
}

/// Mid-month convention: month `j` of year `y` is `y + (j - 0.5) / 12`,
/// so December and the following January sit one month (1/12 year) apart.
pub fn month_to_time(year: i32, month: u32) -> f64 {
    debug_assert!((1..=12).contains(&month));
    year as f64 + (month as f64 - 0.5) / 12.0
}

/// Spatial, temporal and circular lags between two points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lag {
    /// Euclidean spatial distance, km.
    pub h_s: f64,
    /// Absolute time difference, years.
    pub h_t: f64,
    /// Circular lag h_t mod L, in [0, L).
    pub h_star: f64,
    /// Geodesic circular lag min(h_star, L - h_star), in [0, L/2].
    pub d_circ: f64,
    /// Period, years.
    pub period: f64,
}

impl Lag {
    pub const ZERO: Lag =
        Lag { h_s: 0.0, h_t: 0.0, h_star: 0.0, d_circ: 0.0, period: DEFAULT_PERIOD };

    /// Build a lag from raw spatial and temporal distances.
    pub fn from_distances(h_s: f64, h_t: f64, period: f64) -> Lag {
        let mut h_star = h_t % period;
        // Guard against -0.0 and tiny negative residues from the fmod.
        if h_star < 0.0 {
            h_star += period;
        }
        if h_star >= period {
            h_star = 0.0;
        }
        let d_circ = h_star.min(period - h_star);
        Lag { h_s, h_t, h_star, d_circ, period }
    }

    pub fn is_zero(&self) -> bool {
        self.h_s == 0.0 && self.h_t == 0.0
    }
}

/// Snap a temporal lag to the exact monthly grid when it is within a
/// hair of it. Times near the calendar epoch carry ~1e-13 years of
/// representation error, and downstream conditional covariances must be
/// bit-identical for month pairs at the same calendar offset.
#[inline]
pub fn snap_to_months(h_t: f64) -> f64 {
    let months = h_t * 12.0;
    let k = months.round();
    if (months - k).abs() < 1e-6 {
        k / 12.0
    } else {
        h_t
    }
}

/// Lag between two points; symmetric in its arguments.
pub fn lag(p: &SpaceTimePoint, q: &SpaceTimePoint, period: f64) -> Lag {
    let dx = p.easting - q.easting;
    let dy = p.northing - q.northing;
    Lag::from_distances(dx.hypot(dy), snap_to_months((p.time - q.time).abs()), period)
}

/// Heuristic combined space-time distance sqrt((h_s * w)^2 + h_t^2), years.
pub fn combined_distance(lag: &Lag, space_weight: f64) -> Result<f64> {
    if !(space_weight > 0.0) {
        return Err(Error::Config(format!("space_weight must be positive, got {space_weight}")));
    }
    Ok((lag.h_s * space_weight).hypot(lag.h_t))
}

/// Unchecked variant for hot loops; `space_weight` validated upstream.
#[inline]
pub fn combined_distance_unchecked(h_s: f64, h_t: f64, space_weight: f64) -> f64 {
    let a = h_s * space_weight;
    (a * a + h_t * h_t).sqrt()
}

/// Canonical ordering of the design: time, then easting, then northing,
/// with site_id as the final tie-break. Returns the permutation `perm`
/// such that `points[perm[0]], points[perm[1]], ...` is sorted.
pub fn canonical_order(points: &[SpaceTimePoint]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        let p = &points[a];
        let q = &points[b];
        p.time
            .total_cmp(&q.time)
            .then(p.easting.total_cmp(&q.easting))
            .then(p.northing.total_cmp(&q.northing))
            .then(p.site_id.cmp(&q.site_id))
    });
    idx
}
