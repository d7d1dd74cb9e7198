//! Synthetic fleets sampled from known IOHMMs, and brute-force oracles.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, TimeZone};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{observed_day, replay, score_predictions, Predictor};
use crate::geo::{haversine_m, CellId, GridSpec, TrajectoryPoint, EARTH_RADIUS_M};
use crate::iohmm::{IohmmModel, ObservedDay};
use crate::seeds;
use crate::sequences::{
    build_context, build_day_contexts, ActivityDay, SequenceRecord, StayActivity, WeatherCondition,
    WeatherPolicy, WeatherRecord, WeatherTable, DAY_START_HOUR,
};

/// Upper bound on the number of hidden paths [`enumerate_joint`] visits.
pub const ENUMERATION_BOUND: f64 = 1e6;

/// Rules for the exogenous parts of a synthetic day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSampler {
    /// Daily weather probabilities in [`WeatherCondition::ALL`] order.
    pub weather_probs: [f64; 4],
    /// Probability that a calendar day has no activity.
    pub idle_prob: f64,
    pub dwell_min_h: f64,
    /// Mean of the exponential excess dwell.
    pub dwell_extra_mean_h: f64,
}

impl Default for ContextSampler {
    fn default() -> Self {
        Self {
            weather_probs: [0.6, 0.3, 0.1, 0.0],
            idle_prob: 0.05,
            dwell_min_h: 0.2,
            dwell_extra_mean_h: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub ground_truth: IohmmModel,
    pub n_vehicles: usize,
    pub days_per_vehicle: usize,
    /// Inclusive range of attempted activities per active day.
    pub activities_per_day: (usize, usize),
    pub context: ContextSampler,
    pub start_date: NaiveDate,
    pub utc_offset_minutes: i32,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        self.ground_truth.validate()?;
        if self.ground_truth.context_dim != crate::sequences::CONTEXT_DIM {
            return Err(Error::DimensionMismatch {
                expected: crate::sequences::CONTEXT_DIM,
                got: self.ground_truth.context_dim,
            });
        }
        let (lo, hi) = self.activities_per_day;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidParameter(format!(
                "activity range ({lo}, {hi}) is empty"
            )));
        }
        let w = &self.context.weather_probs;
        if w.iter().any(|p| !(*p >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
            return Err(Error::InvalidParameter(
                "weather probabilities must be non-negative with positive sum".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.context.idle_prob) {
            return Err(Error::InvalidParameter(
                "idle probability must be in [0, 1)".into(),
            ));
        }
        if !(self.context.dwell_min_h >= 0.0 && self.context.dwell_extra_mean_h > 0.0) {
            return Err(Error::InvalidParameter(
                "dwell parameters must be non-negative, excess mean positive".into(),
            ));
        }
        FixedOffset::east_opt(self.utc_offset_minutes * 60).ok_or_else(|| {
            Error::InvalidParameter(format!("invalid UTC offset {}", self.utc_offset_minutes))
        })?;
        Ok(())
    }

    fn offset(&self) -> FixedOffset {
        FixedOffset::east_opt(self.utc_offset_minutes * 60).expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedVehicle {
    pub vehicle_id: String,
    pub records: Vec<SequenceRecord>,
    /// Hidden state of every activity, aligned with `records`.
    pub hidden: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedFleet {
    pub vehicles: Vec<SimulatedVehicle>,
    pub weather: Vec<WeatherRecord>,
}

impl SimulatedFleet {
    pub fn weather_table(&self) -> WeatherTable {
        WeatherTable::from_records(self.weather.iter().copied())
            .expect("generated dates are unique")
    }
}

/// Categorical draw; falls back to the last index on rounding shortfall.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut r = rng.random::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        if r < p {
            return i;
        }
        r -= p;
    }
    probs.len() - 1
}

fn round_to_seconds(hours: f64) -> Duration {
    Duration::seconds((hours * 3600.0).round() as i64)
}

pub fn vehicle_name(k: usize) -> String {
    format!("truck-{:03}", k + 1)
}

/// Daily weather for `days` consecutive dates from `start`.
pub fn sample_weather(
    start: NaiveDate,
    days: usize,
    probs: &[f64; 4],
    seed: u64,
) -> Vec<WeatherRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = probs.iter().sum();
    let norm: Vec<f64> = probs.iter().map(|p| p / total).collect();
    (0..days)
        .map(|k| WeatherRecord {
            date: start + Duration::days(k as i64),
            condition: WeatherCondition::ALL[sample_categorical(&norm, &mut rng)],
        })
        .collect()
}

/// Samples one vehicle's days. Contexts are built with the same routine the
/// real pipeline uses.
pub fn sample_vehicle(
    spec: &GeneratorSpec,
    vehicle_id: &str,
    weather: &WeatherTable,
    seed: u64,
) -> Result<SimulatedVehicle> {
    let model = &spec.ground_truth;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dwell_extra = Exp::new(1.0 / spec.context.dwell_extra_mean_h)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let offset = spec.offset();
    let mut history: Vec<ActivityDay> = Vec::new();
    let mut records = Vec::new();
    let mut hidden = Vec::new();
    for k in 0..spec.days_per_vehicle {
        let date = spec.start_date + Duration::days(k as i64);
        let day_start = offset
            .from_local_datetime(&date.and_hms_opt(DAY_START_HOUR, 0, 0).expect("valid hour"))
            .single()
            .expect("fixed offsets are unambiguous");
        let day_end = day_start + Duration::hours(24);
        if rng.random::<f64>() < spec.context.idle_prob {
            continue;
        }
        let target = rng.random_range(spec.activities_per_day.0..=spec.activities_per_day.1);
        let mut day = ActivityDay::from_stays(vehicle_id, day_start, Vec::new());
        let mut states = Vec::with_capacity(target);
        let mut sampled_contexts = Vec::with_capacity(target);
        let mut prev_departure = day_start;
        for i in 1..=target {
            let z = build_context(&day, i, &history, weather, WeatherPolicy::Error)?.to_vec();
            let h_probs = match states.last() {
                None => model.initial_probs(&z)?,
                Some(&u) => model.transition_probs(u, &z)?,
            };
            let h = sample_categorical(&h_probs, &mut rng);
            let l = sample_categorical(&model.destination_probs(h, &z)?, &mut rng);
            let normal = Normal::new(model.duration_mean(h, &z)?, model.sigma[h])
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            // Gaussian durations are truncated to positive values by rejection
            let t = loop {
                let t = normal.sample(&mut rng);
                if t > 0.0 {
                    break t;
                }
            };
            let arrival = prev_departure + round_to_seconds(t);
            let departure =
                arrival + round_to_seconds(spec.context.dwell_min_h + dwell_extra.sample(&mut rng));
            if departure >= day_end {
                break;
            }
            let mut stays = day.stays;
            stays.push(StayActivity {
                cell: model.destinations[l],
                arrival,
                departure,
                centroid: (0.0, 0.0),
            });
            day = ActivityDay::from_stays(vehicle_id, day_start, stays);
            states.push(h);
            sampled_contexts.push(z);
            prev_departure = departure;
        }
        if day.is_empty() {
            continue;
        }
        let contexts = build_day_contexts(&day, &history, weather, WeatherPolicy::Error)?;
        let rebuilt: Vec<Vec<f64>> = contexts[..day.len()].iter().map(|c| c.to_vec()).collect();
        if rebuilt != sampled_contexts {
            return Err(Error::Precondition(format!(
                "vehicle {vehicle_id} day {date}: sampled contexts differ from rebuilt ones"
            )));
        }
        history.push(day.clone());
        records.push(SequenceRecord { day, contexts });
        hidden.push(states);
    }
    Ok(SimulatedVehicle {
        vehicle_id: vehicle_id.to_string(),
        records,
        hidden,
    })
}

/// Samples a whole fleet. Weather is shared by the fleet; each vehicle has a
/// seed derived from the generator seed and its id.
pub fn sample_fleet(spec: &GeneratorSpec) -> Result<SimulatedFleet> {
    spec.validate()?;
    let weather = sample_weather(
        spec.start_date,
        spec.days_per_vehicle,
        &spec.context.weather_probs,
        seeds::derive(spec.seed, 0x5745_4154),
    );
    let table = WeatherTable::from_records(weather.iter().copied())?;
    let vehicles = (0..spec.n_vehicles)
        .map(|k| {
            let vid = vehicle_name(k);
            let seed = seeds::vehicle_seed(spec.seed, &vid);
            sample_vehicle(spec, &vid, &table, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulatedFleet { vehicles, weather })
}

/// Context indices used by the fixture model.
mod ix {
    pub const RAINY: usize = 1;
    pub const LAST_TRIP: usize = 4;
    pub const BIAS: usize = 10;
}

/// Destination cells of the fixture, a few kilometres apart on a 500 m grid.
pub fn fixture_cells() -> Vec<CellId> {
    vec![
        CellId::new(4, 4),
        CellId::new(4, 16),
        CellId::new(16, 10),
        CellId::new(10, 28),
    ]
}

pub fn fixture_grid() -> GridSpec {
    GridSpec {
        origin_lat: 30.55,
        origin_lon: 103.95,
        cell_side_m: 500.0,
        n_rows: 40,
        n_cols: 40,
    }
}

/// Three activity types over four destinations: a loading run (state 0), a
/// dumping run (state 1) and a detour (state 2). Rain diverts loading runs
/// into detours and slows trips; a long dumping trip makes a return to the
/// loading site more likely.
pub fn fixture_truth() -> IohmmModel {
    let d = crate::sequences::CONTEXT_DIM;
    let mut m = IohmmModel::zeros(3, fixture_cells(), d, 0.01);
    let set = |v: &mut Vec<f64>, terms: &[(usize, f64)]| {
        for &(j, x) in terms {
            v[j] = x;
        }
    };
    set(&mut m.lambda_in[0], &[(ix::BIAS, 2.0)]);
    set(&mut m.lambda_tr[0][0], &[(ix::BIAS, -2.0)]);
    set(
        &mut m.lambda_tr[0][1],
        &[(ix::BIAS, 2.5), (ix::RAINY, -4.0)],
    );
    set(
        &mut m.lambda_tr[1][0],
        &[(ix::BIAS, -7.5), (ix::LAST_TRIP, 10.0)],
    );
    set(&mut m.lambda_tr[1][1], &[(ix::BIAS, -3.0)]);
    set(&mut m.lambda_tr[2][0], &[(ix::BIAS, 2.5)]);
    set(&mut m.lambda_tr[2][1], &[(ix::BIAS, -1.0)]);
    // destinations A, B, C; D is the pivot
    let dest = [[3.0, -1.0, -1.0], [-2.0, 2.5, 0.5], [-2.0, -1.0, 2.0]];
    for (u, row) in dest.iter().enumerate() {
        for (l, &x) in row.iter().enumerate() {
            m.lambda_eml[u][l][ix::BIAS] = x;
        }
    }
    set(&mut m.lambda_emt[0], &[(ix::BIAS, 0.45), (ix::RAINY, 0.15)]);
    set(&mut m.lambda_emt[1], &[(ix::BIAS, 0.75), (ix::RAINY, 0.15)]);
    set(&mut m.lambda_emt[2], &[(ix::BIAS, 0.35)]);
    m.sigma = vec![0.08, 0.12, 0.07];
    m
}

/// The recovery fixture: `n_vehicles × days` from [`fixture_truth`].
pub fn fixture_spec(n_vehicles: usize, days: usize, seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        ground_truth: fixture_truth(),
        n_vehicles,
        days_per_vehicle: days,
        activities_per_day: (16, 24),
        context: ContextSampler::default(),
        start_date: NaiveDate::from_ymd_opt(2022, 9, 1).expect("valid date"),
        utc_offset_minutes: 0,
        seed,
    }
}

/// Exact quantities for one day from summing over every hidden path.
#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    pub likelihood: f64,
    pub gamma: Vec<Vec<f64>>,
    pub xi: Vec<Vec<Vec<f64>>>,
    /// `P(h_{m+1} | o_{1:m})` when a context for activity `m + 1` is given.
    pub next_state: Option<Vec<f64>>,
    /// `P(l_{m+1} | o_{1:m})` when a context for activity `m + 1` is given.
    pub next_dest: Option<Vec<f64>>,
}

/// Brute-force likelihood and posteriors of `day` under `model`, using only
/// the model's probability functions. A context beyond the last observation
/// yields the next-step predictive distributions; with no observations they
/// come from the initial model.
pub fn enumerate_joint(model: &IohmmModel, day: &ObservedDay) -> Result<Enumeration> {
    let h = model.n_states;
    let m = day.observations.len();
    let paths = (h as f64).powi(m as i32 + 1);
    if paths > ENUMERATION_BOUND {
        return Err(Error::TooLarge {
            size: paths,
            bound: ENUMERATION_BOUND,
        });
    }
    let predictive = day.contexts.len() > m;
    if day.contexts.len() < m {
        return Err(Error::Precondition(
            "fewer contexts than observations".into(),
        ));
    }
    let init = model.initial_probs(&day.contexts[0])?;
    let trans = (0..day.contexts.len())
        .map(|i| model.transition_matrix(&day.contexts[i]))
        .collect::<Result<Vec<_>>>()?;
    let emis = (0..m)
        .map(|i| {
            (0..h)
                .map(|u| model.emission_prob(&day.observations[i], u, &day.contexts[i]))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut likelihood = 0.0;
    let mut gamma = vec![vec![0.0; h]; m];
    let mut xi = vec![vec![vec![0.0; h]; h]; m.saturating_sub(1)];
    let mut next_state = vec![0.0; h];
    let mut path = vec![0usize; m];
    let total = h.pow(m as u32);
    for code in 0..total {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % h;
            c /= h;
        }
        let mut p = 1.0;
        for i in 0..m {
            let prior = if i == 0 {
                init[path[0]]
            } else {
                trans[i][path[i - 1]][path[i]]
            };
            p *= prior * emis[i][path[i]];
        }
        likelihood += p;
        for i in 0..m {
            gamma[i][path[i]] += p;
            if i > 0 {
                xi[i - 1][path[i - 1]][path[i]] += p;
            }
        }
        if predictive {
            for v in 0..h {
                next_state[v] += if m == 0 {
                    init[v]
                } else {
                    p * trans[m][path[m - 1]][v]
                };
            }
        }
    }
    if m > 0 {
        gamma.iter_mut().flatten().for_each(|g| *g /= likelihood);
        xi.iter_mut()
            .flatten()
            .flatten()
            .for_each(|x| *x /= likelihood);
        next_state.iter_mut().for_each(|x| *x /= likelihood);
    }
    let (next_state, next_dest) = if predictive {
        let z = &day.contexts[m];
        let mut dest = vec![0.0; model.n_destinations()];
        for (v, &w) in next_state.iter().enumerate() {
            for (acc, p) in dest.iter_mut().zip(model.destination_probs(v, z)?) {
                *acc += w * p;
            }
        }
        (Some(next_state), Some(dest))
    } else {
        (None, None)
    };
    Ok(Enumeration {
        likelihood,
        gamma,
        xi,
        next_state,
        next_dest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesRate {
    /// Realized accuracy of the true model's point predictions.
    pub accuracy: f64,
    /// Mean over activities of the true model's largest destination
    /// probability: the expected accuracy of its point predictions.
    pub expected_accuracy: f64,
    pub duration_r2: Option<f64>,
    pub n_activities: usize,
}

/// Scores the generating model on test days by causal replay.
pub fn bayes_rate(truth: &IohmmModel, test: &[SequenceRecord]) -> Result<BayesRate> {
    let preds = replay(&Predictor::Iohmm(truth), test)?;
    let score = score_predictions("truth", &preds);
    let mut expected = 0.0;
    let mut n = 0usize;
    for (k, r) in test.iter().enumerate() {
        let encoded = truth.encode_day(&observed_day(r), true)?;
        for i in 0..r.day.len() {
            let prefix = crate::iohmm::EncodedDay {
                contexts: encoded.contexts[..=i].to_vec(),
                obs: encoded.obs[..i].to_vec(),
            };
            let f = crate::predict::predict_next_encoded(truth, &prefix, k)?;
            expected += f.dest_probs.iter().copied().fold(0.0, f64::max);
            n += 1;
        }
    }
    Ok(BayesRate {
        accuracy: score.dest_accuracy.unwrap_or(f64::NAN),
        expected_accuracy: if n > 0 { expected / n as f64 } else { f64::NAN },
        duration_r2: score.duration_r2,
        n_activities: n,
    })
}

/// Offsets a coordinate by metres north and east.
fn offset_m(lat: f64, lon: f64, north: f64, east: f64) -> (f64, f64) {
    let dlat = north / EARTH_RADIUS_M * 180.0 / std::f64::consts::PI;
    let dlon = east / (EARTH_RADIUS_M * lat.to_radians().cos()) * 180.0 / std::f64::consts::PI;
    (lat + dlat, lon + dlon)
}

/// Fix spacing in the synthesized tracks.
pub const FIX_INTERVAL_S: i64 = 120;
/// Stay fixes scatter uniformly within this radius of the cell centre.
pub const STAY_JITTER_M: f64 = 40.0;
/// Travel between stays bends through a waypoint this far from the straight
/// line, so that even same-cell revisits leave the stay radius.
pub const DETOUR_M: f64 = 3000.0;
/// Minimum spacing of consecutive travel fixes.
pub const MIN_TRAVEL_SPACING_M: f64 = 300.0;

/// GPS fixes reproducing a vehicle's stays: fixes every
/// [`FIX_INTERVAL_S`] around each stay's cell centre from arrival to
/// departure, and travel fixes along a bent path between stays that keep
/// clear of both endpoints.
pub fn synthesize_track(days: &[ActivityDay], grid: &GridSpec, seed: u64) -> Vec<TrajectoryPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut prev: Option<((f64, f64), DateTime<FixedOffset>)> = None;
    for day in days {
        for s in &day.stays {
            let center = grid.cell_center(s.cell);
            if let Some((from, left)) = prev {
                travel_fixes(
                    &day.vehicle_id,
                    from,
                    center,
                    left,
                    s.arrival,
                    &mut rng,
                    &mut out,
                );
            }
            let mut t = s.arrival;
            loop {
                let r = STAY_JITTER_M * rng.random::<f64>().sqrt();
                let a = rng.random::<f64>() * std::f64::consts::TAU;
                let (lat, lon) = offset_m(center.0, center.1, r * a.cos(), r * a.sin());
                out.push(TrajectoryPoint {
                    vehicle_id: day.vehicle_id.clone(),
                    lat,
                    lon,
                    time: t,
                });
                if t >= s.departure {
                    break;
                }
                t = (t + Duration::seconds(FIX_INTERVAL_S)).min(s.departure);
            }
            prev = Some((center, s.departure));
        }
    }
    out
}

fn travel_fixes(
    vid: &str,
    from: (f64, f64),
    to: (f64, f64),
    left: DateTime<FixedOffset>,
    arrive: DateTime<FixedOffset>,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<TrajectoryPoint>,
) {
    let span = (arrive - left).num_seconds();
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mid = ((from.0 + to.0) / 2.0, (from.1 + to.1) / 2.0);
    let way = offset_m(mid.0, mid.1, side * DETOUR_M, side * DETOUR_M);
    let n = (span / FIX_INTERVAL_S - 1).max(0);
    // fixes closer than the spacing to the previous one are skipped, so no
    // run of travel fixes can form a stay (the path folds back on revisits)
    let mut last = from;
    for k in 1..=n {
        // travel fixes cover the middle 80% of the path
        let f = 0.1 + 0.8 * k as f64 / (n + 1) as f64;
        let (a, b, g) = if f < 0.5 {
            (from, way, f * 2.0)
        } else {
            (way, to, f * 2.0 - 1.0)
        };
        let p = (a.0 + (b.0 - a.0) * g, a.1 + (b.1 - a.1) * g);
        if haversine_m(last, p) < MIN_TRAVEL_SPACING_M {
            continue;
        }
        last = p;
        out.push(TrajectoryPoint {
            vehicle_id: vid.to_string(),
            lat: p.0,
            lon: p.1,
            time: left + Duration::seconds(span * k / (n + 1)),
        });
    }
}

/// Hidden-state sequences keyed by vehicle and day.
pub fn hidden_truth(fleet: &SimulatedFleet) -> BTreeMap<String, Vec<Vec<usize>>> {
    fleet
        .vehicles
        .iter()
        .map(|v| (v.vehicle_id.clone(), v.hidden.clone()))
        .collect()
}
