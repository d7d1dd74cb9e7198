//! Next-activity forecasts from a partially observed day.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::CellId;
use crate::iohmm::{forward_filter, EncodedDay, EncodedObs, IohmmModel, Observation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextActivityForecast {
    /// Aligned with `dest_probs`.
    pub destinations: Vec<CellId>,
    pub dest_probs: Vec<f64>,
    /// Predictive distribution of the next hidden state.
    pub state_probs: Vec<f64>,
    pub duration_mean_h: f64,
    pub duration_component_means: Vec<f64>,
    pub duration_component_stds: Vec<f64>,
    pub predicted_cell: CellId,
    pub predicted_duration_h: f64,
}

impl NextActivityForecast {
    /// The `k` most likely destinations, most likely first; equal
    /// probabilities keep cell order.
    pub fn top_k(&self, k: usize) -> Vec<(CellId, f64)> {
        let mut pairs: Vec<(CellId, f64)> = self
            .destinations
            .iter()
            .copied()
            .zip(self.dest_probs.iter().copied())
            .collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        pairs.truncate(k);
        pairs
    }
}

/// Index of the largest value; the first wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Destination argmax and mixture-mean duration. Destinations are sorted,
/// so the first maximum is the lexicographically smallest cell.
pub fn point_prediction(forecast: &NextActivityForecast) -> (CellId, f64) {
    (
        forecast.destinations[argmax(&forecast.dest_probs)],
        forecast.duration_mean_h,
    )
}

/// Forecast for activity `day.len()` (0-based) given the encoded prefix.
/// `day.contexts` must extend one past the observed prefix.
pub fn predict_next_encoded(
    model: &IohmmModel,
    day: &EncodedDay,
    day_index: usize,
) -> Result<NextActivityForecast> {
    let i = day.len();
    if day.contexts.len() <= i {
        return Err(Error::Precondition(format!(
            "forecast of activity {} needs {} contexts, got {}",
            i + 1,
            i + 1,
            day.contexts.len()
        )));
    }
    let z_next = &day.contexts[i];
    let state_probs = match forward_filter(model, day, day_index)? {
        None => model.initial_probs_prepared(z_next),
        Some((alpha, _)) => {
            let a = model.transition_matrix_prepared(z_next);
            let h = model.n_states;
            let mut p: Vec<f64> = (0..h)
                .map(|v| (0..h).map(|u| alpha[u] * a[u][v]).sum())
                .collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            p
        }
    };
    let n_dest = model.n_destinations();
    let mut dest_probs = vec![0.0; n_dest];
    let mut means = Vec::with_capacity(model.n_states);
    for (u, &w) in state_probs.iter().enumerate() {
        for (acc, p) in dest_probs
            .iter_mut()
            .zip(model.dest_probs_prepared(u, z_next))
        {
            *acc += w * p;
        }
        means.push(model.duration_mean_prepared(u, z_next));
    }
    let duration_mean_h: f64 = state_probs.iter().zip(&means).map(|(w, m)| w * m).sum();
    let best = argmax(&dest_probs);
    Ok(NextActivityForecast {
        destinations: model.destinations.clone(),
        predicted_cell: model.destinations[best],
        predicted_duration_h: duration_mean_h,
        dest_probs,
        state_probs,
        duration_mean_h,
        duration_component_means: means,
        duration_component_stds: model.sigma.clone(),
    })
}

/// Forecast for the activity after `prefix`, with raw contexts
/// `z_1..z_{i+1}`. Observed cells outside the model's destination set are an
/// error.
pub fn predict_next(
    model: &IohmmModel,
    prefix: &[Observation],
    contexts: &[Vec<f64>],
) -> Result<NextActivityForecast> {
    let day = encode_prefix(model, prefix, contexts, false)?;
    predict_next_encoded(model, &day, 0)
}

/// Like [`predict_next`], but unknown observed cells are treated as
/// unobserved destinations.
pub fn predict_next_lenient(
    model: &IohmmModel,
    prefix: &[Observation],
    contexts: &[Vec<f64>],
) -> Result<NextActivityForecast> {
    let day = encode_prefix(model, prefix, contexts, true)?;
    predict_next_encoded(model, &day, 0)
}

fn encode_prefix(
    model: &IohmmModel,
    prefix: &[Observation],
    contexts: &[Vec<f64>],
    lenient: bool,
) -> Result<EncodedDay> {
    if contexts.len() < prefix.len() + 1 {
        return Err(Error::Precondition(format!(
            "{} contexts for a prefix of {} activities",
            contexts.len(),
            prefix.len()
        )));
    }
    let contexts = contexts[..=prefix.len()]
        .iter()
        .map(|z| model.prepare(z).map(|c| c.into_owned()))
        .collect::<Result<Vec<_>>>()?;
    let obs = prefix
        .iter()
        .map(|o| {
            if lenient {
                Ok(model.encode_obs_lenient(o))
            } else {
                model.encode_obs(o)
            }
        })
        .collect::<Result<Vec<EncodedObs>>>()?;
    Ok(EncodedDay { contexts, obs })
}
