//! Trajectory ingestion, stay-point detection and grid discretization.
//!
//! A stay is a maximal run of consecutive fixes that all lie within `theta_d`
//! metres of the run's first fix and that spans at least `theta_t` seconds.
//! Stays are mapped to square cells of a planar grid laid over an
//! equirectangular projection anchored at the grid's south-west corner.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// One timestamped GPS fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub vehicle_id: String,
    pub lat: f64,
    pub lon: f64,
    pub time: DateTime<FixedOffset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StayThresholds {
    /// Maximum distance from the first fix of a stay, metres.
    pub theta_d: f64,
    /// Minimum stay span, seconds.
    pub theta_t: f64,
}

impl Default for StayThresholds {
    fn default() -> Self {
        Self {
            theta_d: 200.0,
            theta_t: 600.0,
        }
    }
}

impl StayThresholds {
    pub fn new(theta_d: f64, theta_t: f64) -> Result<Self> {
        let th = Self { theta_d, theta_t };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_d > 0.0 && self.theta_d.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "theta_d must be positive, got {}",
                self.theta_d
            )));
        }
        if !(self.theta_t > 0.0 && self.theta_t.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "theta_t must be positive, got {}",
                self.theta_t
            )));
        }
        Ok(())
    }
}

/// Grid cell index. Ordering is lexicographic on `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub row: u32,
    pub col: u32,
}

impl CellId {
    pub fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Axis-aligned square grid. `(origin_lat, origin_lon)` is the south-west corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_side_m: f64,
    pub n_rows: u32,
    pub n_cols: u32,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_side_m > 0.0 && self.cell_side_m.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "cell_side_m must be positive, got {}",
                self.cell_side_m
            )));
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::InvalidParameter(
                "grid needs at least one row and one column".into(),
            ));
        }
        if !valid_coordinate(self.origin_lat, self.origin_lon) {
            return Err(Error::InvalidParameter(format!(
                "grid origin ({}, {}) is not a valid coordinate",
                self.origin_lat, self.origin_lon
            )));
        }
        Ok(())
    }

    fn metres_per_degree_lat() -> f64 {
        EARTH_RADIUS_M * std::f64::consts::PI / 180.0
    }

    fn metres_per_degree_lon(&self) -> f64 {
        Self::metres_per_degree_lat() * self.origin_lat.to_radians().cos()
    }

    /// Local planar offsets `(north, east)` from the origin, metres.
    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        let north = (lat - self.origin_lat) * Self::metres_per_degree_lat();
        let east = (lon - self.origin_lon) * self.metres_per_degree_lon();
        (north, east)
    }

    pub fn unproject(&self, north: f64, east: f64) -> (f64, f64) {
        (
            self.origin_lat + north / Self::metres_per_degree_lat(),
            self.origin_lon + east / self.metres_per_degree_lon(),
        )
    }

    pub fn cell_center(&self, cell: CellId) -> (f64, f64) {
        let side = self.cell_side_m;
        self.unproject(
            (cell.row as f64 + 0.5) * side,
            (cell.col as f64 + 0.5) * side,
        )
    }

    /// Smallest grid anchored at the south-west corner of `points` that covers
    /// all of them with whole cells.
    pub fn covering<'a, I>(points: I, cell_side_m: f64) -> Result<Self>
    where
        I: IntoIterator<Item = (f64, f64)> + Clone + 'a,
    {
        let mut min_lat = f64::INFINITY;
        let mut min_lon = f64::INFINITY;
        for (lat, lon) in points.clone() {
            min_lat = min_lat.min(lat);
            min_lon = min_lon.min(lon);
        }
        if !min_lat.is_finite() {
            return Err(Error::Precondition(
                "cannot fit a grid to zero points".into(),
            ));
        }
        let mut grid = GridSpec {
            origin_lat: min_lat,
            origin_lon: min_lon,
            cell_side_m,
            n_rows: 1,
            n_cols: 1,
        };
        let (mut max_n, mut max_e) = (0.0f64, 0.0f64);
        for (lat, lon) in points {
            let (n, e) = grid.project(lat, lon);
            max_n = max_n.max(n);
            max_e = max_e.max(e);
        }
        grid.n_rows = (max_n / cell_side_m).floor() as u32 + 1;
        grid.n_cols = (max_e / cell_side_m).floor() as u32 + 1;
        grid.validate()?;
        Ok(grid)
    }
}

pub fn valid_coordinate(lat: f64, lon: f64) -> bool {
    (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon)
}

/// Great-circle distance in metres.
pub fn haversine_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

pub fn cell_of(lat: f64, lon: f64, grid: &GridSpec) -> Result<CellId> {
    let (north, east) = grid.project(lat, lon);
    let row = (north / grid.cell_side_m).floor();
    let col = (east / grid.cell_side_m).floor();
    if !(row >= 0.0 && col >= 0.0 && row < grid.n_rows as f64 && col < grid.n_cols as f64) {
        return Err(Error::OutOfGrid { lat, lon });
    }
    Ok(CellId::new(row as u32, col as u32))
}

/// Inclusive index range `[start, end]` of the fixes forming one stay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawStay {
    pub start: usize,
    pub end: usize,
}

/// Greedy left-to-right stay scan over one vehicle's time-sorted fixes.
pub fn detect_stays(points: &[TrajectoryPoint], th: &StayThresholds) -> Vec<RawStay> {
    let mut stays = Vec::new();
    let mut anchor = 0;
    while anchor < points.len() {
        let first = &points[anchor];
        let mut last = anchor;
        while last + 1 < points.len()
            && haversine_m(
                (first.lat, first.lon),
                (points[last + 1].lat, points[last + 1].lon),
            ) <= th.theta_d
        {
            last += 1;
        }
        let span = (points[last].time - first.time).num_milliseconds() as f64 / 1000.0;
        if last > anchor && span >= th.theta_t {
            stays.push(RawStay {
                start: anchor,
                end: last,
            });
            anchor = last + 1;
        } else {
            anchor += 1;
        }
    }
    stays
}

/// Unweighted mean position of `members`.
pub fn stay_centroid(members: &[TrajectoryPoint]) -> Result<(f64, f64)> {
    if members.is_empty() {
        return Err(Error::Precondition(
            "stay centroid of an empty member set".into(),
        ));
    }
    let n = members.len() as f64;
    let lat = members.iter().map(|p| p.lat).sum::<f64>() / n;
    let lon = members.iter().map(|p| p.lon).sum::<f64>() / n;
    Ok((lat, lon))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRow {
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct IngestedTrajectories {
    pub vehicles: BTreeMap<String, Vec<TrajectoryPoint>>,
    pub skipped: Vec<SkippedRow>,
    pub duplicates_dropped: usize,
    pub conflicts_dropped: usize,
}

#[derive(Debug, Deserialize)]
struct TrajectoryRow {
    vehicle_id: String,
    timestamp: String,
    lat: f64,
    lon: f64,
}

/// Reads `vehicle_id,timestamp,lat,lon` CSV. Bad rows are recorded and skipped.
pub fn ingest_trajectories<R: Read>(source: R) -> Result<IngestedTrajectories> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut out = IngestedTrajectories::default();
    for (idx, record) in reader.deserialize::<TrajectoryRow>().enumerate() {
        let row = idx + 1;
        let rec = match record {
            Ok(r) => r,
            Err(e) => {
                log::warn!("trajectory row {row}: {e}");
                out.skipped.push(SkippedRow {
                    row,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let time = match DateTime::parse_from_rfc3339(&rec.timestamp) {
            Ok(t) => t,
            Err(e) => {
                let reason = format!("bad timestamp {:?}: {e}", rec.timestamp);
                log::warn!("trajectory row {row}: {reason}");
                out.skipped.push(SkippedRow { row, reason });
                continue;
            }
        };
        if !valid_coordinate(rec.lat, rec.lon) {
            let reason = format!("coordinate out of range: ({}, {})", rec.lat, rec.lon);
            log::warn!("trajectory row {row}: {reason}");
            out.skipped.push(SkippedRow { row, reason });
            continue;
        }
        out.vehicles
            .entry(rec.vehicle_id.clone())
            .or_default()
            .push(TrajectoryPoint {
                vehicle_id: rec.vehicle_id,
                lat: rec.lat,
                lon: rec.lon,
                time,
            });
    }
    for (vid, points) in out.vehicles.iter_mut() {
        // stable: same-time fixes keep file order, so "first" means first in the file
        points.sort_by_key(|p| p.time);
        let mut kept: Vec<TrajectoryPoint> = Vec::with_capacity(points.len());
        for p in points.drain(..) {
            match kept.last() {
                Some(prev) if prev.time == p.time => {
                    if prev.lat == p.lat && prev.lon == p.lon {
                        out.duplicates_dropped += 1;
                    } else {
                        log::warn!(
                            "vehicle {vid}: conflicting fixes at {}, keeping the first",
                            p.time
                        );
                        out.conflicts_dropped += 1;
                    }
                }
                _ => kept.push(p),
            }
        }
        *points = kept;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64, secs: i64) -> TrajectoryPoint {
        let base = DateTime::parse_from_rfc3339("2022-09-01T08:00:00+08:00").unwrap();
        TrajectoryPoint {
            vehicle_id: "v".into(),
            lat,
            lon,
            time: base + chrono::Duration::seconds(secs),
        }
    }

    #[test]
    fn haversine_reference_values() {
        assert_eq!(haversine_m((30.0, 104.0), (30.0, 104.0)), 0.0);
        let d = haversine_m((0.0, 0.0), (0.0, 1.0));
        let expected = 2.0 * std::f64::consts::PI * EARTH_RADIUS_M / 360.0;
        assert!((d - expected).abs() < 5.0, "{d} vs {expected}");
        assert!((d - 111_195.0).abs() < 5.0);
    }

    #[test]
    fn tight_cluster_is_one_stay() {
        // 10 fixes within ~50 m over 12 minutes
        let pts: Vec<_> = (0..10)
            .map(|k| {
                pt(
                    30.0 + 0.0001 * (k % 3) as f64,
                    104.0 + 0.0001 * (k % 2) as f64,
                    k * 80,
                )
            })
            .collect();
        let stays = detect_stays(&pts, &StayThresholds::default());
        assert_eq!(stays, vec![RawStay { start: 0, end: 9 }]);
    }

    #[test]
    fn far_apart_points_are_not_a_stay() {
        let pts = vec![pt(30.0, 104.0, 0), pt(30.045, 104.0, 600)];
        assert!(detect_stays(&pts, &StayThresholds::default()).is_empty());
    }

    #[test]
    fn short_cluster_is_not_a_stay() {
        let pts: Vec<_> = (0..5)
            .map(|k| pt(30.0, 104.0 + 0.0001 * k as f64, k * 60))
            .collect();
        assert!(detect_stays(&pts, &StayThresholds::default()).is_empty());
    }

    #[test]
    fn empty_track() {
        assert!(detect_stays(&[], &StayThresholds::default()).is_empty());
    }

    #[test]
    fn thresholds_must_be_positive() {
        assert!(StayThresholds::new(0.0, 600.0).is_err());
        assert!(StayThresholds::new(200.0, -1.0).is_err());
        assert!(StayThresholds::new(200.0, 600.0).is_ok());
    }

    #[test]
    fn centroids() {
        assert_eq!(stay_centroid(&[pt(30.0, 104.0, 0)]).unwrap(), (30.0, 104.0));
        let (la, lo) = stay_centroid(&[pt(30.0, 104.0, 0), pt(30.2, 104.2, 1)]).unwrap();
        assert!((la - 30.1).abs() < 1e-12 && (lo - 104.1).abs() < 1e-12);
        let square = [
            pt(30.0, 104.0, 0),
            pt(30.0, 104.2, 1),
            pt(30.2, 104.0, 2),
            pt(30.2, 104.2, 3),
        ];
        let (la, lo) = stay_centroid(&square).unwrap();
        assert!((la - 30.1).abs() < 1e-12 && (lo - 104.1).abs() < 1e-12);
        assert!(matches!(stay_centroid(&[]), Err(Error::Precondition(_))));
    }

    fn grid() -> GridSpec {
        GridSpec {
            origin_lat: 30.0,
            origin_lon: 104.0,
            cell_side_m: 2000.0,
            n_rows: 62,
            n_cols: 69,
        }
    }

    #[test]
    fn cell_at_origin_and_boundaries() {
        let g = grid();
        assert_eq!(cell_of(30.0, 104.0, &g).unwrap(), CellId::new(0, 0));
        let (lat, lon) = g.unproject(1.0, 2001.0);
        assert_eq!(cell_of(lat, lon, &g).unwrap(), CellId::new(0, 1));
        // projection agrees with great-circle distance to within 0.5 %
        let d = haversine_m((30.0, 104.0), (30.0, lon));
        assert!((d - 2001.0).abs() / 2001.0 < 0.005, "{d}");
        let (lat, lon) = g.unproject(-1.0, 10.0);
        assert!(matches!(
            cell_of(lat, lon, &g),
            Err(Error::OutOfGrid { .. })
        ));
    }

    #[test]
    fn covering_grid_contains_all_points() {
        let pts = [(30.0, 104.0), (30.3, 104.5), (30.1, 104.05)];
        let g = GridSpec::covering(pts.iter().copied(), 2000.0).unwrap();
        for &(la, lo) in &pts {
            cell_of(la, lo, &g).unwrap();
        }
    }

    #[test]
    fn ingest_sorts_dedups_and_skips() {
        let csv = "vehicle_id,timestamp,lat,lon\n\
                   a,2022-09-01T08:02:00+08:00,30.0,104.0\n\
                   a,2022-09-01T08:00:00+08:00,30.0,104.0\n\
                   a,2022-09-01T08:01:00+08:00,30.0,104.0\n\
                   a,2022-09-01T08:01:00+08:00,30.0,104.0\n\
                   a,2022-09-01T08:01:00+08:00,30.5,104.0\n\
                   b,2022-09-01T08:00:00+08:00,95.0,104.0\n\
                   b,not-a-time,30.0,104.0\n\
                   b,2022-09-01T08:00:00+08:00,abc,104.0\n";
        let ing = ingest_trajectories(csv.as_bytes()).unwrap();
        assert_eq!(ing.vehicles.len(), 1);
        let a = &ing.vehicles["a"];
        assert_eq!(a.len(), 3);
        assert!(a.windows(2).all(|w| w[0].time < w[1].time));
        assert_eq!(a[1].lat, 30.0);
        assert_eq!(ing.duplicates_dropped, 1);
        assert_eq!(ing.conflicts_dropped, 1);
        let rows: Vec<_> = ing.skipped.iter().map(|s| s.row).collect();
        assert_eq!(rows, vec![6, 7, 8]);
    }

    #[test]
    fn ingest_empty_file() {
        let ing = ingest_trajectories("vehicle_id,timestamp,lat,lon\n".as_bytes()).unwrap();
        assert!(ing.vehicles.is_empty());
        let ing = ingest_trajectories("".as_bytes()).unwrap();
        assert!(ing.vehicles.is_empty());
    }
}
