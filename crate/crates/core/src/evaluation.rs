//! Chronological splitting, causal replay scoring and the
//! predictability-factor regression.

use std::io::Write;

use chrono::Timelike;
use serde::{Deserialize, Serialize};

use crate::baselines::{lr_predict, mc_predict, LinearDurationModel, MarkovChainModel};
use crate::error::{Error, Result};
use crate::geo::CellId;
use crate::iohmm::{IohmmModel, Observation, ObservedDay};
use crate::predict::predict_next_encoded;
use crate::regression::ols_inference;
use crate::sequences::{ActivityDay, SequenceRecord, BIAS_INDEX};

pub const DEFAULT_TRAIN_FRAC: f64 = 0.7;
pub const DEFAULT_HISTOGRAM_BIN_H: f64 = 0.5;
/// Local hours bounding nighttime arrivals: `[21:00, 05:00)`.
pub const NIGHT_START_HOUR: u32 = 21;
pub const NIGHT_END_HOUR: u32 = 5;
pub const MIN_FACTOR_VEHICLES: usize = 10;

/// The raw day in the form inference consumes: one observation per stay
/// (destination cell and preceding trip duration) and all contexts.
pub fn observed_day(record: &SequenceRecord) -> ObservedDay {
    ObservedDay {
        contexts: record.encoded_contexts(),
        observations: record
            .day
            .stays
            .iter()
            .zip(&record.day.trip_durations)
            .map(|(s, &t)| Observation {
                cell: s.cell,
                duration_h: t,
            })
            .collect(),
    }
}

/// Context regressors of the linear baseline: every feature except the
/// constant, which the model's intercept replaces.
pub fn lr_features(z: &[f64]) -> Vec<f64> {
    z.iter()
        .enumerate()
        .filter(|&(j, _)| j != BIAS_INDEX)
        .map(|(_, &x)| x)
        .collect()
}

/// Training rows `(features, trip duration)` for the linear baseline.
pub fn lr_rows(records: &[SequenceRecord]) -> Vec<(Vec<f64>, f64)> {
    records
        .iter()
        .flat_map(|r| {
            r.contexts
                .iter()
                .zip(&r.day.trip_durations)
                .map(|(c, &t)| (lr_features(&c.to_vec()), t))
        })
        .collect()
}

/// Number of active days assigned to training by a chronological split.
pub fn train_count(n_active: usize, train_frac: f64) -> usize {
    // the tolerance keeps exact products such as 0.7 * 10 from rounding up
    let raw = (n_active as f64 * train_frac - 1e-9).ceil();
    (raw.max(0.0) as usize).min(n_active)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
}

/// Splits a vehicle's days chronologically; empty days are dropped. Fewer
/// than two active days is an error.
pub fn split_days<T, F>(mut days: Vec<T>, train_frac: f64, day_of: F) -> Result<Split<T>>
where
    F: Fn(&T) -> &ActivityDay,
{
    if !(train_frac > 0.0 && train_frac <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train fraction {train_frac} not in (0, 1]"
        )));
    }
    days.retain(|d| !day_of(d).is_empty());
    days.sort_by_key(|d| day_of(d).day_start);
    if days.len() < 2 {
        return Err(Error::Precondition(format!(
            "{} active days; at least 2 are needed to split",
            days.len()
        )));
    }
    let n_train = train_count(days.len(), train_frac);
    let test = days.split_off(n_train);
    Ok(Split { train: days, test })
}

/// One scored test activity. Predictions are absent when the predictor does
/// not cover that target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivityPrediction {
    pub true_cell: CellId,
    pub true_duration_h: f64,
    pub predicted_cell: Option<CellId>,
    pub predicted_duration_h: Option<f64>,
}

/// A predictor scored by causal replay.
pub enum Predictor<'a> {
    Iohmm(&'a IohmmModel),
    MarkovChain(&'a MarkovChainModel),
    Linear(&'a LinearDurationModel),
}

/// Predicts every activity of `record` using only observations earlier in the
/// same day.
pub fn replay_day(
    predictor: &Predictor<'_>,
    record: &SequenceRecord,
    day_index: usize,
) -> Result<Vec<ActivityPrediction>> {
    let day = &record.day;
    let m = day.len();
    let mut out = Vec::with_capacity(m);
    match predictor {
        Predictor::Iohmm(model) => {
            let encoded = model.encode_day(&observed_day(record), true)?;
            for i in 0..m {
                let prefix = crate::iohmm::EncodedDay {
                    contexts: encoded.contexts[..=i].to_vec(),
                    obs: encoded.obs[..i].to_vec(),
                };
                let f = predict_next_encoded(model, &prefix, day_index)?;
                out.push(ActivityPrediction {
                    true_cell: day.stays[i].cell,
                    true_duration_h: day.trip_durations[i],
                    predicted_cell: Some(f.predicted_cell),
                    predicted_duration_h: Some(f.duration_mean_h),
                });
            }
        }
        Predictor::MarkovChain(model) => {
            for i in 0..m {
                let prev = (i > 0).then(|| day.stays[i - 1].cell);
                out.push(ActivityPrediction {
                    true_cell: day.stays[i].cell,
                    true_duration_h: day.trip_durations[i],
                    predicted_cell: Some(mc_predict(model, prev).predicted_cell),
                    predicted_duration_h: None,
                });
            }
        }
        Predictor::Linear(model) => {
            for i in 0..m {
                let z = lr_features(&record.contexts[i].to_vec());
                out.push(ActivityPrediction {
                    true_cell: day.stays[i].cell,
                    true_duration_h: day.trip_durations[i],
                    predicted_cell: None,
                    predicted_duration_h: Some(lr_predict(model, &z)?),
                });
            }
        }
    }
    Ok(out)
}

pub fn replay(
    predictor: &Predictor<'_>,
    records: &[SequenceRecord],
) -> Result<Vec<ActivityPrediction>> {
    let mut out = Vec::new();
    for (k, r) in records.iter().enumerate() {
        out.extend(replay_day(predictor, r, k)?);
    }
    Ok(out)
}

/// `1 − SSE/SST` against the mean of `truth`; `None` when `truth` has zero
/// variance or is empty.
pub fn r_squared(truth: &[f64], predicted: &[f64]) -> Option<f64> {
    if truth.is_empty() || truth.len() != predicted.len() {
        return None;
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if !(sst > 0.0) {
        return None;
    }
    let sse: f64 = truth
        .iter()
        .zip(predicted)
        .map(|(t, p)| (t - p).powi(2))
        .sum();
    Some(1.0 - sse / sst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleScore {
    pub vehicle_id: String,
    /// `None` when the predictor gives no destinations or there are no test
    /// activities.
    pub dest_accuracy: Option<f64>,
    pub duration_r2: Option<f64>,
    pub abs_errors_h: Vec<f64>,
    pub n_test_activities: usize,
}

pub fn score_predictions(vehicle_id: &str, predictions: &[ActivityPrediction]) -> VehicleScore {
    let dest: Vec<bool> = predictions
        .iter()
        .filter_map(|p| p.predicted_cell.map(|c| c == p.true_cell))
        .collect();
    let dest_accuracy = (!dest.is_empty())
        .then(|| dest.iter().filter(|&&hit| hit).count() as f64 / dest.len() as f64);
    let (truth, pred): (Vec<f64>, Vec<f64>) = predictions
        .iter()
        .filter_map(|p| p.predicted_duration_h.map(|t| (p.true_duration_h, t)))
        .unzip();
    VehicleScore {
        vehicle_id: vehicle_id.to_string(),
        dest_accuracy,
        duration_r2: r_squared(&truth, &pred),
        abs_errors_h: truth
            .iter()
            .zip(&pred)
            .map(|(t, p)| (t - p).abs())
            .collect(),
        n_test_activities: predictions.len(),
    }
}

pub fn score_vehicle(
    predictor: &Predictor<'_>,
    vehicle_id: &str,
    test: &[SequenceRecord],
) -> Result<VehicleScore> {
    Ok(score_predictions(vehicle_id, &replay(predictor, test)?))
}

/// Mean of the defined per-vehicle values.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower_h: f64,
    pub upper_h: f64,
    pub count: usize,
    pub fraction: f64,
}

/// Bins non-negative errors into `[k·w, (k+1)·w)`, up to the bin holding the
/// largest error.
pub fn error_histogram(errors: &[f64], bin_h: f64) -> Result<Vec<HistogramBin>> {
    if !(bin_h > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "histogram bin width {bin_h} must be positive"
        )));
    }
    let n_bins = errors
        .iter()
        .map(|e| (e / bin_h).floor() as usize + 1)
        .max()
        .unwrap_or(0);
    let mut counts = vec![0usize; n_bins];
    for e in errors {
        counts[(e / bin_h).floor() as usize] += 1;
    }
    let total = errors.len().max(1) as f64;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lower_h: k as f64 * bin_h,
            upper_h: (k + 1) as f64 * bin_h,
            count,
            fraction: count as f64 / total,
        })
        .collect())
}

pub const FACTOR_NAMES: [&str; 7] = [
    "active_days",
    "avg_daily_activities",
    "std_daily_activities",
    "std_first_trip_duration",
    "n_stays_total",
    "nighttime_day_fraction",
    "n_hidden_states",
];

/// Per-vehicle regressors of the predictability analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorRow {
    pub active_days: f64,
    pub avg_daily_activities: f64,
    pub std_daily_activities: f64,
    /// Spread across days of the first trip's duration, hours.
    pub std_first_trip_duration: f64,
    pub n_stays_total: f64,
    /// Share of active days with an arrival in the night window.
    pub nighttime_day_fraction: f64,
    pub n_hidden_states: f64,
}

impl FactorRow {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.active_days,
            self.avg_daily_activities,
            self.std_daily_activities,
            self.std_first_trip_duration,
            self.n_stays_total,
            self.nighttime_day_fraction,
            self.n_hidden_states,
        ]
    }
}

fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn is_night_hour(hour: u32) -> bool {
    hour >= NIGHT_START_HOUR || hour < NIGHT_END_HOUR
}

/// Factors of one vehicle from all its days. Standard deviations are
/// population deviations.
pub fn factor_row(days: &[ActivityDay], n_hidden_states: usize) -> FactorRow {
    let active: Vec<&ActivityDay> = days.iter().filter(|d| !d.is_empty()).collect();
    let counts: Vec<f64> = active.iter().map(|d| d.len() as f64).collect();
    let firsts: Vec<f64> = active.iter().map(|d| d.trip_durations[0]).collect();
    let night_days = active
        .iter()
        .filter(|d| d.stays.iter().any(|s| is_night_hour(s.arrival.hour())))
        .count();
    let n = active.len();
    FactorRow {
        active_days: n as f64,
        avg_daily_activities: if n > 0 {
            counts.iter().sum::<f64>() / n as f64
        } else {
            0.0
        },
        std_daily_activities: population_std(&counts),
        std_first_trip_duration: population_std(&firsts),
        n_stays_total: counts.iter().sum(),
        nighttime_day_fraction: if n > 0 {
            night_days as f64 / n as f64
        } else {
            0.0
        },
        n_hidden_states: n_hidden_states as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefEstimate {
    pub coef: f64,
    pub std_error: f64,
    pub p_value: f64,
}

impl CoefEstimate {
    pub fn stars(&self) -> &'static str {
        significance_stars(self.p_value)
    }
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTableRow {
    pub variable: String,
    pub destination: CoefEstimate,
    pub duration: CoefEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    /// Intercept first, then one row per factor.
    pub rows: Vec<FactorTableRow>,
    pub n_destination: usize,
    pub n_duration: usize,
    pub jittered: bool,
}

impl FactorTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "variable",
            "destination_coef",
            "destination_std_error",
            "destination_p",
            "destination_stars",
            "duration_coef",
            "duration_std_error",
            "duration_p",
            "duration_stars",
        ])?;
        for r in &self.rows {
            let e = |c: &CoefEstimate| {
                [
                    format!("{}", c.coef),
                    format!("{}", c.std_error),
                    format!("{}", c.p_value),
                    c.stars().to_string(),
                ]
            };
            let mut rec = vec![r.variable.clone()];
            rec.extend(e(&r.destination));
            rec.extend(e(&r.duration));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fit_response(rows: &[(FactorRow, f64)]) -> Result<(Vec<CoefEstimate>, bool)> {
    if rows.len() < MIN_FACTOR_VEHICLES {
        return Err(Error::Precondition(format!(
            "factor regression needs at least {MIN_FACTOR_VEHICLES} vehicles, got {}",
            rows.len()
        )));
    }
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|(f, _)| std::iter::once(1.0).chain(f.to_array()).collect())
        .collect();
    let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let fit = ols_inference(&x, &y)?;
    let est = (0..fit.coefs.len())
        .map(|j| CoefEstimate {
            coef: fit.coefs[j],
            std_error: fit.std_errors[j],
            p_value: fit.p_values[j],
        })
        .collect();
    Ok((est, fit.jittered))
}

/// OLS of destination accuracy and of duration R² on the factors, each with
/// an intercept.
pub fn factor_regression(
    destination: &[(FactorRow, f64)],
    duration: &[(FactorRow, f64)],
) -> Result<FactorTable> {
    let (d, j1) = fit_response(destination)?;
    let (t, j2) = fit_response(duration)?;
    let rows = std::iter::once("intercept")
        .chain(FACTOR_NAMES)
        .enumerate()
        .map(|(j, name)| FactorTableRow {
            variable: name.to_string(),
            destination: d[j],
            duration: t[j],
        })
        .collect();
    Ok(FactorTable {
        rows,
        n_destination: destination.len(),
        n_duration: duration.len(),
        jittered: j1 || j2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        assert_eq!(train_count(10, 0.7), 7);
        assert_eq!(train_count(3, 0.7), 3);
        assert_eq!(train_count(20, 0.7), 14);
        assert_eq!(train_count(60, 0.7), 42);
    }

    #[test]
    fn r_squared_reference_cases() {
        let t = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(r_squared(&t, &t), Some(1.0));
        assert_eq!(r_squared(&t, &[2.5; 4]), Some(0.0));
        assert_eq!(r_squared(&[2.0; 3], &[2.0; 3]), None);
        assert!(r_squared(&t, &[4.0, 3.0, 2.0, 1.0]).unwrap() < 0.0);
    }

    #[test]
    fn histogram_bins() {
        let h = error_histogram(&[0.1, 0.49, 0.5, 1.7], 0.5).unwrap();
        assert_eq!(h.len(), 4);
        assert_eq!(
            h.iter().map(|b| b.count).collect::<Vec<_>>(),
            vec![2, 1, 0, 1]
        );
        assert_eq!(h[3].lower_h, 1.5);
    }

    #[test]
    fn stars_convention() {
        assert_eq!(significance_stars(0.009), "**");
        assert_eq!(significance_stars(0.03), "*");
        assert_eq!(significance_stars(0.2), "");
    }

    #[test]
    fn night_window() {
        assert!(is_night_hour(21));
        assert!(is_night_hour(4));
        assert!(!is_night_hour(5));
        assert!(!is_night_hour(20));
    }

    #[test]
    fn accuracy_counts_exact_matches() {
        let c = |r| CellId::new(r, 0);
        let p = |t, q: Option<CellId>| ActivityPrediction {
            true_cell: c(t),
            true_duration_h: 1.0,
            predicted_cell: q,
            predicted_duration_h: None,
        };
        let s = score_predictions(
            "v",
            &[
                p(1, Some(c(1))),
                p(2, Some(c(1))),
                p(3, Some(c(3))),
                p(9, Some(c(3))),
            ],
        );
        assert_eq!(s.dest_accuracy, Some(0.5));
        assert_eq!(s.duration_r2, None);
        assert_eq!(s.n_test_activities, 4);
    }
}
