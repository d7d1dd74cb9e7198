//! Operational days, trip durations and per-activity context vectors.
//!
//! An operational day runs from 05:00 local time to 05:00 the next day. Within
//! a day the i-th trip duration is the gap between the arrival at stay i and the
//! departure from stay i-1, with the day start standing in for the departure
//! preceding the first stay.

use std::collections::BTreeMap;
use std::io::Read;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, NaiveTime, TimeZone, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, CellId, GridSpec, RawStay, TrajectoryPoint};

pub const DAY_START_HOUR: u32 = 5;

/// Number of entries in [`ContextVector::to_vec`].
pub const CONTEXT_DIM: usize = 11;

pub const CONTEXT_FEATURES: [&str; CONTEXT_DIM] = [
    "sunny",
    "rainy",
    "cloudy",
    "foggy",
    "last_trip_duration_h",
    "last_stay_duration_h",
    "prev_day_first_trip_start_hour",
    "prev_day_last_trip_start_hour",
    "consecutive_idle_days",
    "prev_day_trip_count",
    "bias",
];

/// Index of the constant term in the encoded context.
pub const BIAS_INDEX: usize = CONTEXT_DIM - 1;

pub fn hours_between(from: DateTime<FixedOffset>, to: DateTime<FixedOffset>) -> f64 {
    (to - from).num_milliseconds() as f64 / 3_600_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayActivity {
    pub cell: CellId,
    pub arrival: DateTime<FixedOffset>,
    pub departure: DateTime<FixedOffset>,
    /// `(lat, lon)`
    pub centroid: (f64, f64),
}

impl StayActivity {
    pub fn dwell_hours(&self) -> f64 {
        hours_between(self.arrival, self.departure)
    }
}

/// A stay tagged with its vehicle, as written to the stays JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayRecord {
    pub vehicle_id: String,
    #[serde(flatten)]
    pub stay: StayActivity,
}

/// Turns detected index ranges into located stays. Stays whose centroid falls
/// outside `grid` are dropped with a warning; the count is returned.
pub fn locate_stays(
    points: &[TrajectoryPoint],
    raw: &[RawStay],
    grid: &GridSpec,
) -> Result<(Vec<StayActivity>, usize)> {
    let mut out = Vec::with_capacity(raw.len());
    let mut dropped = 0;
    for r in raw {
        let members = &points[r.start..=r.end];
        let centroid = geo::stay_centroid(members)?;
        match geo::cell_of(centroid.0, centroid.1, grid) {
            Ok(cell) => out.push(StayActivity {
                cell,
                arrival: members[0].time,
                departure: members[members.len() - 1].time,
                centroid,
            }),
            Err(Error::OutOfGrid { lat, lon }) => {
                log::warn!("stay centroid ({lat}, {lon}) outside the grid, dropped");
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, dropped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityDay {
    pub vehicle_id: String,
    pub day_start: DateTime<FixedOffset>,
    pub stays: Vec<StayActivity>,
    /// Hours; `trip_durations[i]` precedes `stays[i]`.
    pub trip_durations: Vec<f64>,
}

impl ActivityDay {
    pub fn date(&self) -> NaiveDate {
        self.day_start.date_naive()
    }

    pub fn len(&self) -> usize {
        self.stays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stays.is_empty()
    }

    /// Local start hours of the day's trips, taken as the departure hours of
    /// its stays (each departure begins a trip).
    pub fn trip_start_hours(&self) -> impl Iterator<Item = u32> + '_ {
        self.stays.iter().map(|s| s.departure.hour())
    }

    /// Assembles a day from its stays, computing trip durations from `day_start`.
    pub fn from_stays(
        vehicle_id: impl Into<String>,
        day_start: DateTime<FixedOffset>,
        stays: Vec<StayActivity>,
    ) -> Self {
        let mut prev = day_start;
        let trip_durations = stays
            .iter()
            .map(|s| {
                let t = hours_between(prev, s.arrival).max(0.0);
                prev = s.departure;
                t
            })
            .collect();
        Self {
            vehicle_id: vehicle_id.into(),
            day_start,
            stays,
            trip_durations,
        }
    }
}

/// The 05:00 start of the operational day containing `t`, in `t`'s offset.
pub fn operational_day_start(t: DateTime<FixedOffset>) -> DateTime<FixedOffset> {
    let shifted = t - Duration::hours(DAY_START_HOUR as i64);
    let start = shifted
        .date_naive()
        .and_time(NaiveTime::from_hms_opt(DAY_START_HOUR, 0, 0).expect("valid time"));
    t.offset()
        .from_local_datetime(&start)
        .single()
        .expect("fixed offsets are unambiguous")
}

/// Groups one vehicle's stays into operational days. `offset` is the local
/// time zone in which the 05:00 boundary is drawn.
pub fn partition_days(
    vehicle_id: &str,
    stays: &[StayActivity],
    offset: FixedOffset,
) -> Result<Vec<ActivityDay>> {
    for w in stays.windows(2) {
        if w[1].arrival < w[0].arrival {
            return Err(Error::Precondition(format!(
                "vehicle {vehicle_id}: stays are not time-ordered"
            )));
        }
    }
    let mut days: Vec<ActivityDay> = Vec::new();
    let mut current: Option<(DateTime<FixedOffset>, Vec<StayActivity>)> = None;
    for stay in stays {
        let local = stay.arrival.with_timezone(&offset);
        let start = operational_day_start(local);
        let end = start + Duration::hours(24);
        if stay.departure > end {
            log::info!(
                "vehicle {vehicle_id}: stay arriving {} spans the 05:00 boundary; assigned by arrival",
                stay.arrival
            );
        }
        match current.as_mut() {
            Some((s, members)) if *s == start => members.push(stay.clone()),
            _ => {
                if let Some((s, members)) = current.take() {
                    days.push(ActivityDay::from_stays(vehicle_id, s, members));
                }
                current = Some((start, vec![stay.clone()]));
            }
        }
    }
    if let Some((s, members)) = current {
        days.push(ActivityDay::from_stays(vehicle_id, s, members));
    }
    Ok(days)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherCondition {
    Sunny,
    Rainy,
    Cloudy,
    Foggy,
}

impl WeatherCondition {
    pub const ALL: [WeatherCondition; 4] = [
        WeatherCondition::Sunny,
        WeatherCondition::Rainy,
        WeatherCondition::Cloudy,
        WeatherCondition::Foggy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeatherCondition::Sunny => "sunny",
            WeatherCondition::Rainy => "rainy",
            WeatherCondition::Cloudy => "cloudy",
            WeatherCondition::Foggy => "foggy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub date: NaiveDate,
    pub condition: WeatherCondition,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeatherTable {
    by_date: BTreeMap<NaiveDate, WeatherCondition>,
}

impl WeatherTable {
    pub fn from_records(records: impl IntoIterator<Item = WeatherRecord>) -> Result<Self> {
        let mut by_date = BTreeMap::new();
        for r in records {
            if by_date.insert(r.date, r.condition).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "more than one weather record for {}",
                    r.date
                )));
            }
        }
        Ok(Self { by_date })
    }

    /// Reads `date,condition` CSV.
    pub fn from_csv<R: Read>(source: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(source);
        let records = reader
            .deserialize::<WeatherRecord>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::from_records(records)
    }

    pub fn get(&self, date: NaiveDate) -> Option<WeatherCondition> {
        self.by_date.get(&date).copied()
    }

    pub fn records(&self) -> impl Iterator<Item = WeatherRecord> + '_ {
        self.by_date
            .iter()
            .map(|(&date, &condition)| WeatherRecord { date, condition })
    }

    pub fn len(&self) -> usize {
        self.by_date.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_date.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeatherPolicy {
    #[default]
    Error,
    ZeroFill,
}

/// The input vector for one activity. Fields are known before the trip starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    pub sunny: u8,
    pub rainy: u8,
    pub cloudy: u8,
    pub foggy: u8,
    pub last_trip_duration_h: f64,
    pub last_stay_duration_h: f64,
    pub prev_day_first_trip_start_hour: u32,
    pub prev_day_last_trip_start_hour: u32,
    pub consecutive_idle_days: u32,
    pub prev_day_trip_count: u32,
    pub bias: u8,
}

impl ContextVector {
    pub fn weather(&self) -> Option<WeatherCondition> {
        [self.sunny, self.rainy, self.cloudy, self.foggy]
            .iter()
            .position(|&b| b == 1)
            .map(|i| WeatherCondition::ALL[i])
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.sunny as f64,
            self.rainy as f64,
            self.cloudy as f64,
            self.foggy as f64,
            self.last_trip_duration_h,
            self.last_stay_duration_h,
            self.prev_day_first_trip_start_hour as f64,
            self.prev_day_last_trip_start_hour as f64,
            self.consecutive_idle_days as f64,
            self.prev_day_trip_count as f64,
            self.bias as f64,
        ]
    }
}

/// Context for the `i`-th activity (1-based) of `day`. `i = m + 1` gives the
/// context of the not-yet-observed next activity. Only days in `history` dated
/// before `day` are consulted, and only stays before `i` within `day`.
pub fn build_context(
    day: &ActivityDay,
    i: usize,
    history: &[ActivityDay],
    weather: &WeatherTable,
    policy: WeatherPolicy,
) -> Result<ContextVector> {
    let m = day.len();
    if i == 0 || i > m + 1 {
        return Err(Error::Precondition(format!(
            "activity index {i} outside [1, {}]",
            m + 1
        )));
    }
    let date = day.date();
    let mut onehot = [0u8; 4];
    match weather.get(date) {
        Some(c) => onehot[c.index()] = 1,
        None => match policy {
            WeatherPolicy::Error => return Err(Error::MissingWeather(date)),
            WeatherPolicy::ZeroFill => {
                log::warn!("no weather for {date}; weather block zero-filled");
            }
        },
    }
    let (last_trip, last_stay) = if i == 1 {
        (0.0, 0.0)
    } else {
        (day.trip_durations[i - 2], day.stays[i - 2].dwell_hours())
    };
    let prev = history
        .iter()
        .rev()
        .find(|d| d.date() < date && !d.is_empty());
    let (first_h, last_h, idle, trips) = match prev {
        Some(p) => {
            let hours: Vec<u32> = p.trip_start_hours().collect();
            let gap = (date - p.date()).num_days() - 1;
            (
                hours[0],
                hours[hours.len() - 1],
                gap.max(0) as u32,
                p.len() as u32,
            )
        }
        None => (0, 0, 0, 0),
    };
    Ok(ContextVector {
        sunny: onehot[0],
        rainy: onehot[1],
        cloudy: onehot[2],
        foggy: onehot[3],
        last_trip_duration_h: last_trip,
        last_stay_duration_h: last_stay,
        prev_day_first_trip_start_hour: first_h,
        prev_day_last_trip_start_hour: last_h,
        consecutive_idle_days: idle,
        prev_day_trip_count: trips,
        bias: 1,
    })
}

/// All `m + 1` contexts of `day`.
pub fn build_day_contexts(
    day: &ActivityDay,
    history: &[ActivityDay],
    weather: &WeatherTable,
    policy: WeatherPolicy,
) -> Result<Vec<ContextVector>> {
    (1..=day.len() + 1)
        .map(|i| build_context(day, i, history, weather, policy))
        .collect()
}

/// An activity day with its contexts, as written to the sequences JSON-lines
/// file. `contexts` has one entry per stay plus one for the pending activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    #[serde(flatten)]
    pub day: ActivityDay,
    pub contexts: Vec<ContextVector>,
}

impl SequenceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.contexts.len() != self.day.len() + 1 {
            return Err(Error::Precondition(format!(
                "vehicle {} day {}: {} contexts for {} stays",
                self.day.vehicle_id,
                self.day.date(),
                self.contexts.len(),
                self.day.len()
            )));
        }
        if self.day.trip_durations.len() != self.day.len() {
            return Err(Error::Precondition(format!(
                "vehicle {} day {}: trip durations do not match stays",
                self.day.vehicle_id,
                self.day.date()
            )));
        }
        Ok(())
    }

    pub fn encoded_contexts(&self) -> Vec<Vec<f64>> {
        self.contexts.iter().map(ContextVector::to_vec).collect()
    }
}

/// Builds sequence records for one vehicle's chronologically ordered days.
pub fn build_sequences(
    days: Vec<ActivityDay>,
    weather: &WeatherTable,
    policy: WeatherPolicy,
) -> Result<Vec<SequenceRecord>> {
    let mut out: Vec<SequenceRecord> = Vec::with_capacity(days.len());
    for (k, day) in days.iter().enumerate() {
        let contexts = build_day_contexts(day, &days[..k], weather, policy)?;
        out.push(SequenceRecord {
            day: day.clone(),
            contexts,
        });
    }
    Ok(out)
}
