//! Station data schema: CSV ingestion, validation of the ecoregion label
//! hierarchy, and the in-memory dataset in canonical point order.
//!
//! Input CSV columns (header mandatory, empty field = missing):
//! `site_id, easting_km, northing_km, elevation_m, z2, z3, z4, z5, year,
//! month, rain_mm, tmin_c, tmax_c`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::spacetime::{canonical_order, month_to_time, SpaceTimePoint};
use crate::{Error, Result};

pub const ECOREGION_TIERS: usize = 5;

/// A station with its coordinates and nested ecoregion labels z1..z5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: u32,
    pub easting_km: f64,
    pub northing_km: f64,
    pub elevation_km: f64,
    /// labels[k-1] is the tier-k ecoregion code; labels[0] is always 1.
    pub labels: [u32; ECOREGION_TIERS],
}

/// One raw monthly record as read from the CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub site_id: u32,
    pub year: i32,
    pub month: u32,
    pub rain_mm: Option<f64>,
    pub tmin_c: Option<f64>,
    pub tmax_c: Option<f64>,
}

impl StationRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(1..=12).contains(&self.month) {
            return Err(format!("month must be 1..12, got {}", self.month));
        }
        if let Some(r) = self.rain_mm {
            if !(r >= 0.0) {
                return Err(format!("rain must be >= 0, got {r}"));
            }
        }
        if let (Some(lo), Some(hi)) = (self.tmin_c, self.tmax_c) {
            if hi < lo {
                return Err(format!("tmax {hi} is below tmin {lo}"));
            }
        }
        Ok(())
    }
}

/// The validated dataset, with one point per (site, year, month) row, kept
/// in canonical space-time order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub sites: Vec<Site>,
    /// Canonically ordered design points (elevation already in km).
    pub points: Vec<SpaceTimePoint>,
    /// Index into `sites` for each point.
    pub site_of_point: Vec<usize>,
    /// (year, month) for each point.
    pub year_month: Vec<(i32, u32)>,
    /// Raw observations aligned with `points`.
    pub records: Vec<StationRecord>,
    /// Number of distinct tier-k labels, k = 1..5.
    pub tier_sizes: [usize; ECOREGION_TIERS],
}

impl Dataset {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn site(&self, point: usize) -> &Site {
        &self.sites[self.site_of_point[point]]
    }

    /// Tier-k label of a point's site, 1-based tier in 1..=5.
    pub fn tier_label(&self, point: usize, tier: usize) -> u32 {
        self.site(point).labels[tier - 1]
    }

    /// Distinct labels of a tier, sorted.
    pub fn tier_labels(&self, tier: usize) -> Vec<u32> {
        let mut v: Vec<u32> = self.sites.iter().map(|s| s.labels[tier - 1]).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Index of a site by station id.
    pub fn site_index(&self, id: u32) -> Option<usize> {
        self.sites.iter().position(|s| s.id == id)
    }

    pub fn from_records(sites: Vec<Site>, records: Vec<StationRecord>) -> Result<Dataset> {
        let site_idx: HashMap<u32, usize> =
            sites.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        let mut points = Vec::with_capacity(records.len());
        for (row, r) in records.iter().enumerate() {
            r.validate().map_err(|msg| Error::DataRow { row: row + 2, msg })?;
            let si = *site_idx.get(&r.site_id).ok_or_else(|| Error::DataRow {
                row: row + 2,
                msg: format!("unknown site_id {}", r.site_id),
            })?;
            let s = &sites[si];
            points.push(SpaceTimePoint {
                site_id: r.site_id,
                easting: s.easting_km,
                northing: s.northing_km,
                time: month_to_time(r.year, r.month),
                elevation: s.elevation_km,
            });
        }
        let perm = canonical_order(&points);
        let points: Vec<_> = perm.iter().map(|&i| points[i]).collect();
        let records: Vec<_> = perm.iter().map(|&i| records[i]).collect();
        // Duplicate (site, year, month) rows are a data error.
        for w in points.windows(2) {
            if w[0].site_id == w[1].site_id && (w[0].time - w[1].time).abs() < 1e-9 {
                return Err(Error::Data(format!(
                    "duplicate record for site {} at time {:.4}",
                    w[0].site_id, w[0].time
                )));
            }
        }
        let site_of_point: Vec<usize> = points.iter().map(|p| site_idx[&p.site_id]).collect();
        let year_month: Vec<(i32, u32)> = records.iter().map(|r| (r.year, r.month)).collect();
        validate_hierarchy(&sites)?;
        let mut tier_sizes = [0usize; ECOREGION_TIERS];
        for (k, size) in tier_sizes.iter_mut().enumerate() {
            let mut v: Vec<u32> = sites.iter().map(|s| s.labels[k]).collect();
            v.sort_unstable();
            v.dedup();
            *size = v.len();
        }
        Ok(Dataset { sites, points, site_of_point, year_month, records, tier_sizes })
    }
}

/// Tier nesting: every tier-k label must map to a single tier-(k-1) parent,
/// and z1 must be 1 everywhere.
fn validate_hierarchy(sites: &[Site]) -> Result<()> {
    for s in sites {
        if s.labels[0] != 1 {
            return Err(Error::Data(format!(
                "site {}: tier-1 label must be 1, got {}",
                s.id, s.labels[0]
            )));
        }
    }
    for k in 1..ECOREGION_TIERS {
        let mut parent: HashMap<u32, u32> = HashMap::new();
        for s in sites {
            let child = s.labels[k];
            let par = s.labels[k - 1];
            match parent.insert(child, par) {
                Some(prev) if prev != par => {
                    return Err(Error::Data(format!(
                        "tier {} label {} maps to both tier-{} parents {} and {}",
                        k + 1,
                        child,
                        k,
                        prev,
                        par
                    )));
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    idx: usize,
    name: &str,
    row: usize,
) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse()
        .map_err(|_| Error::DataRow { row, msg: format!("cannot parse {name} from {raw:?}") })
}

fn parse_opt(rec: &csv::StringRecord, idx: usize, name: &str, row: usize) -> Result<Option<f64>> {
    let raw = rec.get(idx).unwrap_or("").trim();
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse()
        .map(Some)
        .map_err(|_| Error::DataRow { row, msg: format!("cannot parse {name} from {raw:?}") })
}

pub const CSV_HEADER: [&str; 13] = [
    "site_id",
    "easting_km",
    "northing_km",
    "elevation_m",
    "z2",
    "z3",
    "z4",
    "z5",
    "year",
    "month",
    "rain_mm",
    "tmin_c",
    "tmax_c",
];

/// Read the station CSV schema.
pub fn read_station_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected: Vec<&str> = CSV_HEADER.to_vec();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Data(format!("unexpected CSV header {got:?}; expected {expected:?}")));
    }
    let mut sites: Vec<Site> = Vec::new();
    let mut site_idx: HashMap<u32, usize> = HashMap::new();
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2; // 1-based, after the header
        let site_id: u32 = parse_field(&rec, 0, "site_id", row)?;
        let easting: f64 = parse_field(&rec, 1, "easting_km", row)?;
        let northing: f64 = parse_field(&rec, 2, "northing_km", row)?;
        let elevation_m: f64 = parse_field(&rec, 3, "elevation_m", row)?;
        let mut labels = [1u32; ECOREGION_TIERS];
        for k in 1..ECOREGION_TIERS {
            labels[k] = parse_field(&rec, 3 + k, &format!("z{}", k + 1), row)?;
        }
        let site = Site {
            id: site_id,
            easting_km: easting,
            northing_km: northing,
            elevation_km: elevation_m / 1000.0,
            labels,
        };
        match site_idx.get(&site_id) {
            None => {
                site_idx.insert(site_id, sites.len());
                sites.push(site);
            }
            Some(&si) => {
                if sites[si] != site {
                    return Err(Error::DataRow {
                        row,
                        msg: format!("site {site_id} has inconsistent coordinates or labels"),
                    });
                }
            }
        }
        let record = StationRecord {
            site_id,
            year: parse_field(&rec, 8, "year", row)?,
            month: parse_field(&rec, 9, "month", row)?,
            rain_mm: parse_opt(&rec, 10, "rain_mm", row)?,
            tmin_c: parse_opt(&rec, 11, "tmin_c", row)?,
            tmax_c: parse_opt(&rec, 12, "tmax_c", row)?,
        };
        record.validate().map_err(|msg| Error::DataRow { row, msg })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Data("dataset contains no records".into()));
    }
    Dataset::from_records(sites, records)
}

pub fn read_station_csv_path(path: &Path) -> Result<Dataset> {
    read_station_csv(std::fs::File::open(path)?)
}

/// Write a dataset back out in the input schema.
pub fn write_station_csv<W: Write>(writer: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for (i, rec) in data.records.iter().enumerate() {
        let s = data.site(i);
        w.write_record(&[
            s.id.to_string(),
            format!("{:.4}", s.easting_km),
            format!("{:.4}", s.northing_km),
            format!("{:.1}", s.elevation_km * 1000.0),
            s.labels[1].to_string(),
            s.labels[2].to_string(),
            s.labels[3].to_string(),
            s.labels[4].to_string(),
            rec.year.to_string(),
            rec.month.to_string(),
            fmt_opt(rec.rain_mm),
            fmt_opt(rec.tmin_c),
            fmt_opt(rec.tmax_c),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Grid-point CSV for prediction: `site_id, easting_km, northing_km,
/// elevation_m, z2, z3, z4, z5` (one row per grid site).
pub fn read_grid_csv<R: Read>(reader: R) -> Result<Vec<Site>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let expected: Vec<&str> = CSV_HEADER[..8].to_vec();
    if headers != expected {
        return Err(Error::Data(format!(
            "unexpected grid header {headers:?}; expected {expected:?}"
        )));
    }
    let mut sites = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let mut labels = [1u32; ECOREGION_TIERS];
        for k in 1..ECOREGION_TIERS {
            labels[k] = parse_field(&rec, 3 + k, &format!("z{}", k + 1), row)?;
        }
        sites.push(Site {
            id: parse_field(&rec, 0, "site_id", row)?,
            easting_km: parse_field(&rec, 1, "easting_km", row)?,
            northing_km: parse_field(&rec, 2, "northing_km", row)?,
            elevation_km: parse_field::<f64>(&rec, 3, "elevation_m", row)? / 1000.0,
            labels,
        });
    }
    if sites.is_empty() {
        return Err(Error::Data("grid file contains no points".into()));
    }
    Ok(sites)
}

/// SHA-256 of a file, hex-encoded; used in run manifests.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_text(rows: &[&str]) -> String {
        let mut s = CSV_HEADER.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn reads_and_orders_records() {
        let text = csv_text(&[
            "2,10.0,0.0,500,1,1,1,1,2000,2,12.0,3.0,9.0",
            "1,0.0,0.0,100,1,1,1,1,2000,1,0.0,-1.0,5.0",
            "1,0.0,0.0,100,1,1,1,1,2000,2,,,",
        ]);
        let d = read_station_csv(text.as_bytes()).unwrap();
        assert_eq!(d.sites.len(), 2);
        assert_eq!(d.n_points(), 3);
        // Canonical order: time first.
        assert_eq!(d.records[0].month, 1);
        assert_eq!(d.points[1].site_id, 1);
        assert_eq!(d.points[2].site_id, 2);
        assert_eq!(d.site(0).elevation_km, 0.1);
        assert!(d.records[1].rain_mm.is_none());
    }

    #[test]
    fn rejects_tmax_below_tmin_with_row_number() {
        let text = csv_text(&["1,0.0,0.0,100,1,1,1,1,2000,1,0.0,5.0,3.0"]);
        match read_station_csv(text.as_bytes()) {
            Err(Error::DataRow { row, msg }) => {
                assert_eq!(row, 2);
                assert!(msg.contains("tmax"));
            }
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_nested_labels() {
        let text = csv_text(&[
            "1,0.0,0.0,100,1,3,1,1,2000,1,1.0,1.0,2.0",
            "2,5.0,0.0,100,2,3,1,1,2000,1,1.0,1.0,2.0",
        ]);
        assert!(matches!(read_station_csv(text.as_bytes()), Err(Error::Data(_))));
    }

    #[test]
    fn rejects_duplicates_and_bad_header() {
        let text = csv_text(&[
            "1,0.0,0.0,100,1,1,1,1,2000,1,1.0,1.0,2.0",
            "1,0.0,0.0,100,1,1,1,1,2000,1,2.0,1.0,2.0",
        ]);
        assert!(read_station_csv(text.as_bytes()).is_err());
        assert!(read_station_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn roundtrip_write_read() {
        let text = csv_text(&[
            "1,0.0,0.0,100,1,1,1,1,2000,1,0.0,-1.0,5.0",
            "2,10.0,0.0,500,1,2,2,2,2000,1,12.0,3.0,9.0",
        ]);
        let d = read_station_csv(text.as_bytes()).unwrap();
        let mut out = Vec::new();
        write_station_csv(&mut out, &d).unwrap();
        let d2 = read_station_csv(out.as_slice()).unwrap();
        assert_eq!(d.sites, d2.sites);
        assert_eq!(d.year_month, d2.year_month);
    }
}
