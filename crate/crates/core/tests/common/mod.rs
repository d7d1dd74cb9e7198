//! Independent oracles and random instances shared by integration tests.
#![allow(dead_code)]

use chrono::{DateTime, Duration, FixedOffset};
use haulcast_core::geo::{haversine_m, CellId, RawStay, StayThresholds, TrajectoryPoint};
use haulcast_core::iohmm::{IohmmModel, Observation, ObservedDay};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Stay scan written directly from the window conditions: for each anchor,
/// the largest window whose every fix lies within θ_d of the anchor is a stay
/// when it spans at least θ_t. Cubic, but obviously faithful.
pub fn brute_force_stays(points: &[TrajectoryPoint], th: &StayThresholds) -> Vec<RawStay> {
    let within = |i: usize, j: usize| {
        (i + 1..=j).all(|k| {
            haversine_m(
                (points[i].lat, points[i].lon),
                (points[k].lat, points[k].lon),
            ) <= th.theta_d
        })
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < points.len() {
        let j = (i..points.len()).rev().find(|&j| within(i, j)).unwrap_or(i);
        let span = (points[j].time - points[i].time).num_milliseconds() as f64 / 1000.0;
        if j > i && span >= th.theta_t {
            out.push(RawStay { start: i, end: j });
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

pub fn t0() -> DateTime<FixedOffset> {
    DateTime::parse_from_rfc3339("2022-09-01T06:00:00+08:00").unwrap()
}

/// Up to `max_len` fixes alternating between lingering near a few sites and
/// jumping away, at irregular intervals.
pub fn random_track(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<TrajectoryPoint> {
    let n = rng.random_range(0..=max_len);
    let sites = [(30.60, 104.00), (30.605, 104.004), (30.62, 104.03)];
    let mut time = t0();
    let mut site = sites[0];
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < 0.2 {
                site = sites[rng.random_range(0..sites.len())];
            }
            // offsets up to ~330 m straddle θ_d = 200 m
            let lat = site.0 + (rng.random::<f64>() - 0.5) * 0.006;
            let lon = site.1 + (rng.random::<f64>() - 0.5) * 0.006;
            time += Duration::seconds(rng.random_range(30..400));
            TrajectoryPoint {
                vehicle_id: "v".into(),
                lat,
                lon,
                time,
            }
        })
        .collect()
}

/// A model with standard-normal logits, means in [0.5, 2.5] and σ in
/// [0.3, 1.0]. The last context feature is a constant 1.
pub fn random_model(rng: &mut ChaCha8Rng, h: usize, l: usize, d: usize) -> IohmmModel {
    let cells: Vec<CellId> = (0..l as u32).map(|c| CellId::new(0, c)).collect();
    let mut m = IohmmModel::zeros(h, cells, d, 0.01);
    let mut normal = || {
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    for u in 0..h {
        for j in 0..d {
            m.lambda_in[u][j] = normal();
            for v in 0..h {
                m.lambda_tr[u][v][j] = normal();
            }
            for c in 0..l {
                m.lambda_eml[u][c][j] = normal();
            }
            m.lambda_emt[u][j] = 0.3 * normal();
        }
        m.lambda_emt[u][d - 1] = 0.5 + 2.0 * (u as f64 + 0.5) / h as f64;
    }
    for u in 0..h {
        m.sigma[u] = 0.3 + 0.7 * rng.random::<f64>();
    }
    m
}

/// `m` observations with `extra` further contexts.
pub fn random_day(rng: &mut ChaCha8Rng, model: &IohmmModel, m: usize, extra: usize) -> ObservedDay {
    let d = model.context_dim;
    let contexts = (0..m + extra)
        .map(|_| {
            let mut z: Vec<f64> = (0..d - 1)
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect();
            z.push(1.0);
            z
        })
        .collect();
    let observations = (0..m)
        .map(|_| Observation {
            cell: model.destinations[rng.random_range(0..model.n_destinations())],
            duration_h: 0.2 + 2.5 * rng.random::<f64>(),
        })
        .collect();
    ObservedDay {
        contexts,
        observations,
    }
}

/// Mean silhouette from the definition, with singleton clusters scoring 0.
pub fn silhouette_definition(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let k = labels.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for i in 0..points.len() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..points.len() {
            if j != i {
                sums[labels[j]] += dist(&points[i], &points[j]);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / points.len() as f64
}

/// Relative closeness with an absolute floor of 1 on the scale.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
