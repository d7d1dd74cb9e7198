//! Hidden-state count selection by K-Means and silhouette scoring.

use chrono::Timelike;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::sequences::ActivityDay;

pub const DEFAULT_K_CANDIDATES: [usize; 6] = [3, 4, 5, 6, 7, 8];
pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_RESTARTS: usize = 10;

/// Per-activity clustering features, z-scored over one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivityFeature {
    pub arrival_hour: f64,
    pub duration_h: f64,
    pub cell_row: f64,
    pub cell_col: f64,
}

impl ActivityFeature {
    pub fn as_array(&self) -> [f64; 4] {
        [
            self.arrival_hour,
            self.duration_h,
            self.cell_row,
            self.cell_col,
        ]
    }
}

/// Z-scores raw 4-feature rows with population statistics. Constant columns
/// become 0.
pub fn standardize(raw: &[[f64; 4]]) -> Vec<ActivityFeature> {
    let n = raw.len() as f64;
    let mut mean = [0.0; 4];
    let mut sd = [0.0; 4];
    if !raw.is_empty() {
        for j in 0..4 {
            mean[j] = raw.iter().map(|r| r[j]).sum::<f64>() / n;
            sd[j] = (raw.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
        }
    }
    raw.iter()
        .map(|r| {
            let f = |j: usize| {
                if sd[j] > 0.0 {
                    (r[j] - mean[j]) / sd[j]
                } else {
                    0.0
                }
            };
            ActivityFeature {
                arrival_hour: f(0),
                duration_h: f(1),
                cell_row: f(2),
                cell_col: f(3),
            }
        })
        .collect()
}

/// Features of every stay of a vehicle, in day order. Arrival hour is
/// fractional local time; duration is the dwell time.
pub fn activity_features(days: &[ActivityDay]) -> Vec<ActivityFeature> {
    let raw: Vec<[f64; 4]> = days
        .iter()
        .flat_map(|d| d.stays.iter())
        .map(|s| {
            let t = s.arrival.time();
            let hour =
                f64::from(t.hour()) + f64::from(t.minute()) / 60.0 + f64::from(t.second()) / 3600.0;
            [
                hour,
                s.dwell_hours(),
                f64::from(s.cell.row),
                f64::from(s.cell.col),
            ]
        })
        .collect();
    standardize(&raw)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares.
    pub inertia: f64,
    pub iterations: usize,
    /// Cluster count actually used (below the request when points repeat).
    pub k: usize,
    /// Inertia after each Lloyd assignment step.
    pub inertia_trace: Vec<f64>,
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut sorted: Vec<&Vec<f64>> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    sorted.dedup();
    sorted.len()
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            // the tail fallback may land on a zero-weight point
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).expect("positive total");
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, m)| (c, sq_dist(p, m)))
                .fold(
                    (0, f64::INFINITY),
                    |acc, x| if x.1 < acc.1 { x } else { acc },
                );
            inertia += d;
            best
        })
        .collect();
    (labels, inertia)
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let dim = points[0].len();
    let mut centroids = plus_plus_seed(points, k, rng);
    let (mut labels, mut inertia) = assign(points, &centroids);
    let mut trace = vec![inertia];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for j in 0..dim {
                sums[l][j] += p[j];
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let (next, next_inertia) = assign(points, &centroids);
        trace.push(next_inertia);
        let stable = next == labels;
        labels = next;
        inertia = next_inertia;
        if stable {
            break;
        }
    }
    KMeansResult {
        labels,
        centroids,
        inertia,
        iterations,
        k,
        inertia_trace: trace,
    }
}

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs by
/// inertia is returned. `k` is reduced to the number of distinct points when
/// necessary.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<KMeansResult> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "k-means needs k >= 2, got {k}"
        )));
    }
    if points.len() < k {
        return Err(Error::Precondition(format!(
            "{} points for k = {k}",
            points.len()
        )));
    }
    let distinct = distinct_count(points);
    let k_used = if distinct < k {
        log::warn!("only {distinct} distinct points; reducing k from {k}");
        distinct
    } else {
        k
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(points, k_used, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Mean silhouette coefficient, with Euclidean distance. Points in singleton
/// clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            got: labels.len(),
        });
    }
    let n_clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n_clusters];
    for &l in labels {
        sizes[l] += 1;
    }
    let occupied = sizes.iter().filter(|&&s| s > 0).count();
    if occupied < 2 {
        return Err(Error::UndefinedScore(format!(
            "silhouette needs at least 2 clusters, got {occupied}"
        )));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; n_clusters];
    for (i, p) in points.iter().enumerate() {
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, q);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..n_clusters)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub k: usize,
    /// `None` when the clustering collapsed to one cluster.
    pub silhouette: Option<f64>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSelection {
    pub n_states: usize,
    /// True when the vehicle had too few activities to score candidates.
    pub fallback: bool,
    pub scores: Vec<CandidateScore>,
}

impl StateSelection {
    /// K-Means labels of the chosen candidate, if it was scored.
    pub fn labels(&self) -> Option<&[usize]> {
        self.scores
            .iter()
            .find(|c| c.k == self.n_states)
            .map(|c| c.labels.as_slice())
    }
}

/// Scores one candidate K.
pub fn score_candidate(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<CandidateScore> {
    let km = kmeans(points, k, restarts, seed)?;
    let silhouette = match silhouette(points, &km.labels) {
        Ok(s) => Some(s),
        Err(Error::UndefinedScore(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(CandidateScore {
        k,
        silhouette,
        labels: km.labels,
    })
}

/// Picks the argmax-silhouette candidate; ties go to the smaller K.
pub fn choose(scores: &[CandidateScore], fallback_k: usize) -> usize {
    let mut best: Option<(usize, f64)> = None;
    let mut sorted: Vec<&CandidateScore> = scores.iter().collect();
    sorted.sort_by_key(|c| c.k);
    for c in sorted {
        if let Some(s) = c.silhouette {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c.k, s));
            }
        }
    }
    best.map_or(fallback_k, |(k, _)| k)
}

/// Chooses `|H|` for one vehicle from its activity features.
///
/// Each candidate K is clustered with seeds derived from `(seed, K)`.
/// Vehicles with at most `max(K)` activities fall back to `min(K)`.
pub fn select_state_count(
    features: &[ActivityFeature],
    candidates: &[usize],
    restarts: usize,
    seed: u64,
) -> Result<StateSelection> {
    let k_min = *candidates
        .iter()
        .min()
        .ok_or_else(|| Error::InvalidParameter("empty K candidate set".into()))?;
    let k_max = *candidates.iter().max().expect("non-empty");
    if k_min < 2 {
        return Err(Error::InvalidParameter(format!(
            "K candidates must be >= 2, got {k_min}"
        )));
    }
    if features.len() < k_max + 1 {
        return Ok(StateSelection {
            n_states: k_min,
            fallback: true,
            scores: Vec::new(),
        });
    }
    let points: Vec<Vec<f64>> = features.iter().map(|f| f.as_array().to_vec()).collect();
    let mut ks = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let scores = ks
        .iter()
        .map(|&k| score_candidate(&points, k, restarts, seeds::derive(seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StateSelection {
        n_states: choose(&scores, k_min),
        fallback: false,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(center: [f64; 2], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                vec![
                    center[0] + rng.random::<f64>() * 0.1,
                    center[1] + rng.random::<f64>() * 0.1,
                ]
            })
            .collect()
    }

    #[test]
    fn two_clouds_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = cloud([0.0, 0.0], 20, &mut rng);
        pts.extend(cloud([10.0, 10.0], 20, &mut rng));
        let km = kmeans(&pts, 2, 3, 9).unwrap();
        assert!(km.labels[..20].iter().all(|&l| l == km.labels[0]));
        assert!(km.labels[20..].iter().all(|&l| l == km.labels[20]));
        assert_ne!(km.labels[0], km.labels[20]);
        assert!(silhouette(&pts, &km.labels).unwrap() > 0.9);
    }

    #[test]
    fn identical_points_reduce_k() {
        let pts = vec![vec![1.0, 1.0]; 6];
        let km = kmeans(&pts, 3, 2, 0).unwrap();
        assert_eq!(km.k, 1);
        assert!(km.labels.iter().all(|&l| l == 0));
        assert!(matches!(
            silhouette(&pts, &km.labels),
            Err(Error::UndefinedScore(_))
        ));
    }

    #[test]
    fn kmeans_is_deterministic_and_inertia_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random(), rng.random()]).collect();
        let a = kmeans(&pts, 4, 5, 17).unwrap();
        let b = kmeans(&pts, 4, 5, 17).unwrap();
        assert_eq!(a, b);
        for w in a.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn singleton_scores_zero() {
        let pts = vec![vec![0.0], vec![0.1], vec![5.0]];
        let s = silhouette(&pts, &[0, 0, 1]).unwrap();
        // the singleton contributes 0
        let expected = ((5.0 - 0.1) / 5.0 + (4.9 - 0.1) / 4.9) / 3.0;
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn few_activities_fall_back() {
        let f = standardize(&[
            [1.0, 1.0, 0.0, 0.0],
            [2.0, 1.0, 1.0, 0.0],
            [3.0, 2.0, 0.0, 1.0],
        ]);
        let s = select_state_count(&f, &DEFAULT_K_CANDIDATES, 2, 0).unwrap();
        assert_eq!(s.n_states, 3);
        assert!(s.fallback);
    }

    #[test]
    fn ties_go_to_smaller_k() {
        let mk = |k, s| CandidateScore {
            k,
            silhouette: Some(s),
            labels: vec![],
        };
        assert_eq!(choose(&[mk(5, 0.4), mk(3, 0.4), mk(4, 0.2)], 3), 3);
        assert_eq!(choose(&[mk(3, 0.1), mk(4, 0.6)], 3), 4);
    }

    #[test]
    fn standardize_uses_population_std() {
        let f = standardize(&[[0.0, 5.0, 0.0, 0.0], [2.0, 5.0, 0.0, 0.0]]);
        assert_eq!(f[0].arrival_hour, -1.0);
        assert_eq!(f[1].arrival_hour, 1.0);
        assert_eq!(f[0].duration_h, 0.0);
    }
}
