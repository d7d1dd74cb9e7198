mod common;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate};
use haulcast_core::geo::{detect_stays, CellId, StayThresholds};
use haulcast_core::sequences::{
    build_sequences, operational_day_start, partition_days, ActivityDay, StayActivity,
    WeatherCondition, WeatherPolicy, WeatherRecord, WeatherTable,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Time-ordered, non-overlapping stays spread over about a week.
fn random_stays(seed: u64, n: usize) -> Vec<StayActivity> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = common::t0();
    (0..n)
        .map(|_| {
            // gaps occasionally skip whole days
            let gap = if rng.random::<f64>() < 0.1 {
                rng.random_range(20..60) * 3600
            } else {
                rng.random_range(0..5400)
            };
            let arrival = t + Duration::seconds(gap);
            let departure = arrival + Duration::seconds(rng.random_range(600..5000));
            t = departure;
            StayActivity {
                cell: CellId::new(rng.random_range(0..3), 0),
                arrival,
                departure,
                centroid: (30.6, 104.0),
            }
        })
        .collect()
}

fn offset() -> FixedOffset {
    FixedOffset::east_opt(8 * 3600).unwrap()
}

fn weather_for(days: &[ActivityDay]) -> WeatherTable {
    let first = days.first().map_or(NaiveDate::MIN, |d| d.date());
    let last = days.last().map_or(NaiveDate::MIN, |d| d.date());
    WeatherTable::from_records(
        first
            .iter_days()
            .take_while(|d| *d <= last)
            .enumerate()
            .map(|(k, date)| WeatherRecord {
                date,
                condition: WeatherCondition::ALL[k % 4],
            }),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn stays_match_the_window_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let track = common::random_track(&mut rng, 60);
        let th = StayThresholds::default();
        prop_assert_eq!(detect_stays(&track, &th), common::brute_force_stays(&track, &th));
    }

    #[test]
    fn detected_stays_satisfy_the_window_conditions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let track = common::random_track(&mut rng, 60);
        let th = StayThresholds::default();
        let stays = detect_stays(&track, &th);
        for w in stays.windows(2) {
            prop_assert!(w[0].end < w[1].start);
        }
        for s in stays {
            let span = (track[s.end].time - track[s.start].time).num_seconds() as f64;
            prop_assert!(span >= th.theta_t);
            for k in s.start..=s.end {
                let a = (track[s.start].lat, track[s.start].lon);
                prop_assert!(haulcast_core::geo::haversine_m(a, (track[k].lat, track[k].lon)) <= th.theta_d);
            }
        }
    }

    #[test]
    fn partition_is_lossless(seed in any::<u64>(), n in 0usize..80) {
        let stays = random_stays(seed, n);
        let days = partition_days("v", &stays, offset()).unwrap();
        let flat: Vec<StayActivity> = days.iter().flat_map(|d| d.stays.clone()).collect();
        prop_assert_eq!(&flat, &stays);
        for d in &days {
            prop_assert!(!d.is_empty());
            prop_assert_eq!(d.trip_durations.len(), d.len());
            for (s, t) in d.stays.iter().zip(&d.trip_durations) {
                prop_assert!(*t >= 0.0);
                prop_assert_eq!(operational_day_start(s.arrival.with_timezone(&offset())), d.day_start);
            }
            let mut prev = d.day_start;
            for (s, t) in d.stays.iter().zip(&d.trip_durations) {
                if s.arrival > prev {
                    prop_assert!(*t > 0.0);
                }
                prev = s.departure;
            }
        }
        for w in days.windows(2) {
            prop_assert!(w[0].day_start < w[1].day_start);
        }
    }

    #[test]
    fn contexts_ignore_the_future(seed in any::<u64>(), n in 2usize..60, cut in any::<prop::sample::Index>()) {
        let stays = random_stays(seed, n);
        let days = partition_days("v", &stays, offset()).unwrap();
        let weather = weather_for(&days);
        let before = build_sequences(days.clone(), &weather, WeatherPolicy::Error).unwrap();

        // rewrite everything from stay `j` of day `k` onward
        let k = cut.index(days.len());
        let j = cut.index(days[k].len());
        let mut mutated = days.clone();
        let shift = |s: &StayActivity, late: i64| StayActivity {
            cell: CellId::new(s.cell.row + 7, 1),
            arrival: s.arrival + Duration::seconds(late),
            departure: s.departure + Duration::seconds(2 * late),
            centroid: s.centroid,
        };
        let mut ks: Vec<StayActivity> = mutated[k].stays[..j].to_vec();
        let mut carry = 0;
        for s in &days[k].stays[j..] {
            ks.push(shift(s, 60 + carry));
            carry += 60;
        }
        mutated[k] = ActivityDay::from_stays("v", days[k].day_start, ks);
        for d in mutated.iter_mut().skip(k + 1) {
            let moved = d.stays.iter().map(|s| shift(s, 30)).collect();
            *d = ActivityDay::from_stays("v", d.day_start, moved);
        }
        let after = build_sequences(mutated, &weather, WeatherPolicy::Error).unwrap();
        for q in 0..k {
            prop_assert_eq!(&before[q].contexts, &after[q].contexts);
        }
        prop_assert_eq!(&before[k].contexts[..=j], &after[k].contexts[..=j]);
    }
}

#[test]
fn weather_one_hot_sums_to_one() {
    let stays = random_stays(4, 50);
    let days = partition_days("v", &stays, offset()).unwrap();
    let seq = build_sequences(days.clone(), &weather_for(&days), WeatherPolicy::Error).unwrap();
    for r in &seq {
        for c in &r.contexts {
            assert_eq!(c.sunny + c.rainy + c.cloudy + c.foggy, 1);
            assert_eq!(c.bias, 1);
        }
    }
}

#[test]
fn missing_weather_follows_the_policy() {
    let stays = random_stays(5, 10);
    let days = partition_days("v", &stays, offset()).unwrap();
    let empty = WeatherTable::default();
    assert!(build_sequences(days.clone(), &empty, WeatherPolicy::Error).is_err());
    let filled = build_sequences(days, &empty, WeatherPolicy::ZeroFill).unwrap();
    assert!(filled.iter().flat_map(|r| &r.contexts).all(|c| c.sunny
        + c.rainy
        + c.cloudy
        + c.foggy
        == 0));
}

#[test]
fn early_morning_stays_belong_to_the_previous_day() {
    let t = |s: &str| DateTime::parse_from_rfc3339(s).unwrap();
    let stay = |a: &str, d: &str| StayActivity {
        cell: CellId::new(0, 0),
        arrival: t(a),
        departure: t(d),
        centroid: (30.6, 104.0),
    };
    let stays = vec![
        stay("2022-09-01T22:00:00+08:00", "2022-09-01T22:30:00+08:00"),
        stay("2022-09-02T04:30:00+08:00", "2022-09-02T05:30:00+08:00"),
        stay("2022-09-02T08:00:00+08:00", "2022-09-02T08:20:00+08:00"),
    ];
    let days = partition_days("v", &stays, offset()).unwrap();
    assert_eq!(days.len(), 2);
    assert_eq!(days[0].len(), 2);
    assert_eq!(days[1].trip_durations, vec![3.0]);
}
