//! Descriptive fleet statistics.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Timelike;
use serde::{Deserialize, Serialize};

use crate::sequences::ActivityDay;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Self {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            min: v[0],
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleStats {
    pub vehicle_id: String,
    pub active_days: usize,
    pub stay_count: usize,
    /// Raw GPS fixes, when the caller knows them.
    pub trajectory_records: Option<usize>,
    pub stay_duration_min: Option<Summary>,
    pub distinct_cells: usize,
    /// Stay arrivals by local hour of day.
    pub arrivals_by_hour: [usize; 24],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetReport {
    pub vehicles: Vec<VehicleStats>,
    pub arrivals_by_hour: [usize; 24],
    /// Number of vehicles with at least one arrival in each hour.
    pub vehicles_active_by_hour: [usize; 24],
}

pub fn vehicle_stats(
    vehicle_id: &str,
    days: &[ActivityDay],
    records: Option<usize>,
) -> VehicleStats {
    let mut cells = BTreeSet::new();
    let mut durations = Vec::new();
    let mut by_hour = [0usize; 24];
    for day in days {
        for s in &day.stays {
            cells.insert(s.cell);
            durations.push(s.dwell_hours() * 60.0);
            by_hour[s.arrival.hour() as usize] += 1;
        }
    }
    VehicleStats {
        vehicle_id: vehicle_id.to_string(),
        active_days: days.iter().filter(|d| !d.is_empty()).count(),
        stay_count: durations.len(),
        trajectory_records: records,
        stay_duration_min: Summary::of(&durations),
        distinct_cells: cells.len(),
        arrivals_by_hour: by_hour,
    }
}

pub fn fleet_stats(
    vehicles: &BTreeMap<String, Vec<ActivityDay>>,
    trajectory_records: Option<&BTreeMap<String, usize>>,
) -> FleetReport {
    let stats: Vec<VehicleStats> = vehicles
        .iter()
        .map(|(vid, days)| {
            let rec = trajectory_records.and_then(|m| m.get(vid).copied());
            vehicle_stats(vid, days, rec)
        })
        .collect();
    let mut arrivals = [0usize; 24];
    let mut active = [0usize; 24];
    for s in &stats {
        for h in 0..24 {
            arrivals[h] += s.arrivals_by_hour[h];
            active[h] += usize::from(s.arrivals_by_hour[h] > 0);
        }
    }
    FleetReport {
        vehicles: stats,
        arrivals_by_hour: arrivals,
        vehicles_active_by_hour: active,
    }
}
