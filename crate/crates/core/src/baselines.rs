//! Reference predictors: a smoothed first-order Markov chain over
//! destinations and a linear regression for durations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::CellId;
use crate::predict::argmax;
use crate::regression::{dot, weighted_least_squares_fit};
use crate::sequences::ActivityDay;

/// Count-based destination chain. Each day restarts from the first-activity
/// distribution; transitions are counted within days only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChainModel {
    /// Sorted ascending.
    pub destinations: Vec<CellId>,
    pub first_counts: Vec<u64>,
    /// Number of observed first activities.
    pub total_first: u64,
    /// `trans_counts[a][b]` counts `a → b` within a day.
    pub trans_counts: Vec<Vec<u64>>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McForecast {
    pub probs: Vec<f64>,
    pub predicted_cell: CellId,
}

pub fn mc_fit(days: &[ActivityDay], alpha: f64) -> Result<MarkovChainModel> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "smoothing alpha must be positive, got {alpha}"
        )));
    }
    let mut destinations: Vec<CellId> = days
        .iter()
        .flat_map(|d| d.stays.iter().map(|s| s.cell))
        .collect();
    destinations.sort();
    destinations.dedup();
    if destinations.is_empty() {
        return Err(Error::Precondition(
            "Markov chain needs at least one activity".into(),
        ));
    }
    let n = destinations.len();
    let idx = |c: &CellId| destinations.binary_search(c).expect("collected above");
    let mut first_counts = vec![0u64; n];
    let mut trans_counts = vec![vec![0u64; n]; n];
    for day in days {
        let cells: Vec<usize> = day.stays.iter().map(|s| idx(&s.cell)).collect();
        if let Some(&first) = cells.first() {
            first_counts[first] += 1;
        }
        for w in cells.windows(2) {
            trans_counts[w[0]][w[1]] += 1;
        }
    }
    Ok(MarkovChainModel {
        total_first: first_counts.iter().sum(),
        destinations,
        first_counts,
        trans_counts,
        alpha,
    })
}

impl MarkovChainModel {
    fn smoothed(&self, counts: &[u64]) -> Vec<f64> {
        let total: u64 = counts.iter().sum();
        let n = self.destinations.len() as f64;
        let denom = total as f64 + self.alpha;
        counts
            .iter()
            .map(|&c| (c as f64 + self.alpha / n) / denom)
            .collect()
    }

    /// Distribution of the day's first destination.
    pub fn first_probs(&self) -> Vec<f64> {
        let n = self.destinations.len() as f64;
        let denom = self.total_first as f64 + self.alpha;
        self.first_counts
            .iter()
            .map(|&c| (c as f64 + self.alpha / n) / denom)
            .collect()
    }

    /// Distribution of the next destination given the previous one.
    pub fn transition_probs(&self, prev: CellId) -> Vec<f64> {
        match self.destinations.binary_search(&prev) {
            Ok(i) => self.smoothed(&self.trans_counts[i]),
            Err(_) => {
                log::warn!("previous cell {prev} unseen in training; using a smoothing-only row");
                self.smoothed(&vec![0; self.destinations.len()])
            }
        }
    }
}

pub fn mc_predict(model: &MarkovChainModel, prev: Option<CellId>) -> McForecast {
    let probs = match prev {
        None => model.first_probs(),
        Some(c) => model.transition_probs(c),
    };
    McForecast {
        predicted_cell: model.destinations[argmax(&probs)],
        probs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDurationModel {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub residual_std: f64,
}

/// Ordinary least squares of `t` on `[1, z]`. Rank deficiency is absorbed by
/// the Gram jitter of [`weighted_least_squares_fit`].
pub fn lr_fit(rows: &[(Vec<f64>, f64)]) -> Result<LinearDurationModel> {
    if rows.is_empty() {
        return Err(Error::Precondition(
            "linear duration model needs at least one row".into(),
        ));
    }
    let design: Vec<Vec<f64>> = rows
        .iter()
        .map(|(z, _)| std::iter::once(1.0).chain(z.iter().copied()).collect())
        .collect();
    let zs: Vec<&[f64]> = design.iter().map(Vec::as_slice).collect();
    let ts: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let fit = weighted_least_squares_fit(&zs, &ts, &vec![1.0; rows.len()], f64::MIN_POSITIVE)?;
    Ok(LinearDurationModel {
        beta0: fit.coefs[0],
        beta: fit.coefs[1..].to_vec(),
        residual_std: fit.sigma,
    })
}

pub fn lr_predict(model: &LinearDurationModel, z: &[f64]) -> Result<f64> {
    if z.len() != model.beta.len() {
        return Err(Error::DimensionMismatch {
            expected: model.beta.len(),
            got: z.len(),
        });
    }
    Ok(model.beta0 + dot(&model.beta, z))
}
