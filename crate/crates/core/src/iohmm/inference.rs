//! Scaled forward-backward recursions.
//!
//! Forward vectors are normalized at every step. The per-step normalizer is
//! kept in log form (emission log-densities are shifted by their per-step
//! maximum before exponentiation, and the shift is folded into the
//! normalizer), so the day's log-likelihood is the sum of `log_scaling`.

use serde::{Deserialize, Serialize};

use super::model::{EncodedObs, IohmmModel, Observation};
use crate::error::{Error, Result};

/// A day prepared for inference: contexts in model space and encoded
/// observations. `contexts` may be one longer than `obs`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDay {
    pub contexts: Vec<Vec<f64>>,
    pub obs: Vec<EncodedObs>,
}

impl EncodedDay {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Raw training/evaluation day: contexts as produced by
/// [`ContextVector::to_vec`](crate::sequences::ContextVector::to_vec) and
/// observations. Only the first `observations.len()` contexts describe
/// observed activities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedDay {
    pub contexts: Vec<Vec<f64>>,
    pub observations: Vec<Observation>,
}

impl IohmmModel {
    /// Encodes a raw day. Unknown destinations fail unless `lenient`, in
    /// which case they become unobserved.
    pub fn encode_day(&self, day: &ObservedDay, lenient: bool) -> Result<EncodedDay> {
        if day.contexts.len() < day.observations.len() {
            return Err(Error::Precondition(format!(
                "{} contexts for {} observations",
                day.contexts.len(),
                day.observations.len()
            )));
        }
        let contexts = day
            .contexts
            .iter()
            .map(|z| self.prepare(z).map(|c| c.into_owned()))
            .collect::<Result<Vec<_>>>()?;
        let obs = day
            .observations
            .iter()
            .map(|o| {
                if lenient {
                    Ok(self.encode_obs_lenient(o))
                } else {
                    self.encode_obs(o)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedDay { contexts, obs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTables {
    /// Normalized forward vectors, `m × |H|`.
    pub alpha: Vec<Vec<f64>>,
    /// Backward vectors scaled by the same normalizers, `m × |H|`.
    pub beta: Vec<Vec<f64>>,
    /// `P(h_i = u | o_{1:m})`, `m × |H|`.
    pub gamma: Vec<Vec<f64>>,
    /// `xi[i - 1][u][v] = P(h_{i-1} = u, h_i = v | o_{1:m})` for `i = 1..m`
    /// (0-based), `(m − 1) × |H| × |H|`.
    pub xi: Vec<Vec<Vec<f64>>>,
    pub log_likelihood: f64,
    /// Log of the per-step normalizers.
    pub log_scaling: Vec<f64>,
}

struct StepTerms {
    /// `exp(log emission − shift)`
    emission: Vec<Vec<f64>>,
    /// `transitions[i]` is used entering step `i` (index 0 unused).
    transitions: Vec<Vec<Vec<f64>>>,
    initial: Vec<f64>,
    shift: Vec<f64>,
}

fn step_terms(model: &IohmmModel, day: &EncodedDay, day_index: usize) -> Result<StepTerms> {
    let m = day.len();
    let h = model.n_states;
    let mut emission = Vec::with_capacity(m);
    let mut shift = Vec::with_capacity(m);
    for (i, obs) in day.obs.iter().enumerate() {
        let z = &day.contexts[i];
        let logs: Vec<f64> = (0..h)
            .map(|u| model.log_emission_prepared(obs, u, z))
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Degenerate {
                day: day_index,
                step: i + 1,
                detail: "emission density is zero or non-finite for every state".into(),
            });
        }
        emission.push(logs.iter().map(|l| (l - max).exp()).collect());
        shift.push(max);
    }
    let transitions = (0..m)
        .map(|i| {
            if i == 0 {
                Vec::new()
            } else {
                model.transition_matrix_prepared(&day.contexts[i])
            }
        })
        .collect();
    Ok(StepTerms {
        emission,
        transitions,
        initial: model.initial_probs_prepared(&day.contexts[0]),
        shift,
    })
}

fn forward_pass(
    terms: &StepTerms,
    h: usize,
    day_index: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let m = terms.emission.len();
    let mut alpha = Vec::with_capacity(m);
    let mut norms = Vec::with_capacity(m);
    let mut log_scaling = Vec::with_capacity(m);
    for i in 0..m {
        let mut a = vec![0.0; h];
        for v in 0..h {
            let prior = if i == 0 {
                terms.initial[v]
            } else {
                let prev: &Vec<f64> = &alpha[i - 1];
                (0..h).map(|u| prev[u] * terms.transitions[i][u][v]).sum()
            };
            a[v] = prior * terms.emission[i][v];
        }
        let c: f64 = a.iter().sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Degenerate {
                day: day_index,
                step: i + 1,
                detail: format!("forward mass {c}"),
            });
        }
        a.iter_mut().for_each(|x| *x /= c);
        alpha.push(a);
        norms.push(c);
        log_scaling.push(c.ln() + terms.shift[i]);
    }
    Ok((alpha, norms, log_scaling))
}

/// Posterior tables for one day. `day_index` only labels errors.
pub fn forward_backward_day(
    model: &IohmmModel,
    day: &EncodedDay,
    day_index: usize,
) -> Result<PosteriorTables> {
    let m = day.len();
    let h = model.n_states;
    if m == 0 {
        return Err(Error::Precondition(format!(
            "day {day_index} has no observations"
        )));
    }
    if day.contexts.len() < m {
        return Err(Error::Precondition(format!(
            "day {day_index}: {} contexts for {m} observations",
            day.contexts.len()
        )));
    }
    let terms = step_terms(model, day, day_index)?;
    let (alpha, norms, log_scaling) = forward_pass(&terms, h, day_index)?;

    let mut beta = vec![vec![1.0; h]; m];
    for i in (0..m - 1).rev() {
        let next = i + 1;
        for u in 0..h {
            let s: f64 = (0..h)
                .map(|v| terms.transitions[next][u][v] * terms.emission[next][v] * beta[next][v])
                .sum();
            beta[i][u] = s / norms[next];
        }
    }

    let gamma: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let g: Vec<f64> = (0..h).map(|u| alpha[i][u] * beta[i][u]).collect();
            let s: f64 = g.iter().sum();
            g.into_iter().map(|x| x / s).collect()
        })
        .collect();

    let xi: Vec<Vec<Vec<f64>>> = (1..m)
        .map(|i| {
            let mut x = vec![vec![0.0; h]; h];
            let mut s = 0.0;
            for u in 0..h {
                for v in 0..h {
                    let val = alpha[i - 1][u]
                        * terms.transitions[i][u][v]
                        * terms.emission[i][v]
                        * beta[i][v]
                        / norms[i];
                    x[u][v] = val;
                    s += val;
                }
            }
            x.iter_mut().flatten().for_each(|val| *val /= s);
            x
        })
        .collect();

    Ok(PosteriorTables {
        alpha,
        beta,
        gamma,
        xi,
        log_likelihood: log_scaling.iter().sum(),
        log_scaling,
    })
}

/// Posterior tables for every day.
pub fn forward_backward(model: &IohmmModel, days: &[EncodedDay]) -> Result<Vec<PosteriorTables>> {
    days.iter()
        .enumerate()
        .map(|(k, d)| forward_backward_day(model, d, k))
        .collect()
}

/// Normalized filtering distribution `P(h_m | o_{1:m})` and the prefix
/// log-likelihood. An empty prefix yields `None`.
pub fn forward_filter(
    model: &IohmmModel,
    day: &EncodedDay,
    day_index: usize,
) -> Result<Option<(Vec<f64>, f64)>> {
    if day.is_empty() {
        return Ok(None);
    }
    let terms = step_terms(model, day, day_index)?;
    let (alpha, _, log_scaling) = forward_pass(&terms, model.n_states, day_index)?;
    Ok(Some((
        alpha.last().cloned().expect("non-empty"),
        log_scaling.iter().sum(),
    )))
}

/// Total log-likelihood of a set of days.
pub fn log_likelihood(model: &IohmmModel, days: &[EncodedDay]) -> Result<f64> {
    let mut total = 0.0;
    for (k, d) in days.iter().enumerate() {
        if let Some((_, ll)) = forward_filter(model, d, k)? {
            total += ll;
        }
    }
    Ok(total)
}
