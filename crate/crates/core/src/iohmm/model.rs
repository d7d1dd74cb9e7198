use std::borrow::Cow;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::CellId;
use crate::regression::{dot, log_sum_exp, softmax};

/// A destination–duration pair emitted by one activity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub cell: CellId,
    pub duration_h: f64,
}

/// An observation with its destination resolved to an index into the model's
/// destination set. `dest = None` marks a destination that is unobserved (or
/// unknown to the model); its categorical factor is then marginalized out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedObs {
    pub dest: Option<usize>,
    pub duration_h: f64,
}

/// Per-feature affine standardization of contexts. Features whose scale is 1
/// and mean 0 pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ContextScaler {
    /// Z-scores the features in `columns` using population statistics; a zero
    /// spread leaves the feature centred only.
    pub fn fit<'a>(
        contexts: impl IntoIterator<Item = &'a [f64]>,
        dim: usize,
        columns: &[usize],
    ) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for z in contexts {
            n += 1;
            for &j in columns {
                sum[j] += z[j];
                sq[j] += z[j] * z[j];
            }
        }
        let mut mean = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        if n > 0 {
            for &j in columns {
                let m = sum[j] / n as f64;
                let var = (sq[j] / n as f64 - m * m).max(0.0);
                mean[j] = m;
                if var > 0.0 {
                    scale[j] = var.sqrt();
                }
            }
        }
        Self { mean, scale }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Input-output HMM parameters for one vehicle.
///
/// Every categorical block (initial, each transition row, each state's
/// destination model) is a multinomial logit whose last category is the zero
/// pivot. Durations are Gaussian with a state-specific linear mean and a
/// state-specific constant standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IohmmModel {
    pub n_states: usize,
    /// Sorted ascending.
    pub destinations: Vec<CellId>,
    pub context_dim: usize,
    /// `[state][feature]`
    pub lambda_in: Vec<Vec<f64>>,
    /// `[previous state][next state][feature]`
    pub lambda_tr: Vec<Vec<Vec<f64>>>,
    /// `[state][destination][feature]`
    pub lambda_eml: Vec<Vec<Vec<f64>>>,
    /// `[state][feature]`
    pub lambda_emt: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub sigma_floor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler: Option<ContextScaler>,
}

impl IohmmModel {
    /// All-zero coefficients and unit standard deviations.
    pub fn zeros(
        n_states: usize,
        mut destinations: Vec<CellId>,
        context_dim: usize,
        sigma_floor: f64,
    ) -> Self {
        destinations.sort();
        destinations.dedup();
        let n_dest = destinations.len();
        Self {
            n_states,
            destinations,
            context_dim,
            lambda_in: vec![vec![0.0; context_dim]; n_states],
            lambda_tr: vec![vec![vec![0.0; context_dim]; n_states]; n_states],
            lambda_eml: vec![vec![vec![0.0; context_dim]; n_dest]; n_states],
            lambda_emt: vec![vec![0.0; context_dim]; n_states],
            sigma: vec![1.0f64.max(sigma_floor); n_states],
            sigma_floor,
            scaler: None,
        }
    }

    pub fn n_destinations(&self) -> usize {
        self.destinations.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.n_states;
        let l = self.destinations.len();
        let d = self.context_dim;
        let bad = |what: &str| Err(Error::InvalidParameter(format!("model: {what}")));
        if h == 0 {
            return bad("needs at least one hidden state");
        }
        if l == 0 {
            return bad("needs at least one destination");
        }
        if self.destinations.windows(2).any(|w| w[0] >= w[1]) {
            return bad("destinations must be sorted and unique");
        }
        let shape_ok = self.lambda_in.len() == h
            && self.lambda_in.iter().all(|r| r.len() == d)
            && self.lambda_tr.len() == h
            && self
                .lambda_tr
                .iter()
                .all(|row| row.len() == h && row.iter().all(|c| c.len() == d))
            && self.lambda_eml.len() == h
            && self
                .lambda_eml
                .iter()
                .all(|row| row.len() == l && row.iter().all(|c| c.len() == d))
            && self.lambda_emt.len() == h
            && self.lambda_emt.iter().all(|r| r.len() == d)
            && self.sigma.len() == h;
        if !shape_ok {
            return bad("coefficient array shapes are inconsistent");
        }
        if !(self.sigma_floor > 0.0) {
            return bad("sigma_floor must be positive");
        }
        if self
            .sigma
            .iter()
            .any(|&s| !(s >= self.sigma_floor) || !s.is_finite())
        {
            return bad("every sigma must be finite and at least sigma_floor");
        }
        if let Some(sc) = &self.scaler {
            if sc.mean.len() != d || sc.scale.len() != d || sc.scale.iter().any(|&s| !(s > 0.0)) {
                return bad("context scaler is malformed");
            }
        }
        let all_finite = self
            .lambda_in
            .iter()
            .chain(self.lambda_emt.iter())
            .chain(self.lambda_tr.iter().flatten())
            .chain(self.lambda_eml.iter().flatten())
            .flatten()
            .all(|x| x.is_finite());
        if !all_finite {
            return bad("coefficients must be finite");
        }
        Ok(())
    }

    pub fn dest_index(&self, cell: &CellId) -> Option<usize> {
        self.destinations.binary_search(cell).ok()
    }

    pub fn encode_obs(&self, obs: &Observation) -> Result<EncodedObs> {
        let dest = self
            .dest_index(&obs.cell)
            .ok_or(Error::UnknownDestination(obs.cell))?;
        if !obs.duration_h.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite duration {}",
                obs.duration_h
            )));
        }
        Ok(EncodedObs {
            dest: Some(dest),
            duration_h: obs.duration_h,
        })
    }

    /// Like [`encode_obs`](Self::encode_obs) but maps unknown cells to an
    /// unobserved destination instead of failing.
    pub fn encode_obs_lenient(&self, obs: &Observation) -> EncodedObs {
        EncodedObs {
            dest: self.dest_index(&obs.cell),
            duration_h: obs.duration_h,
        }
    }

    /// Maps a raw context into the space the coefficients live in.
    pub fn prepare<'a>(&self, z: &'a [f64]) -> Result<Cow<'a, [f64]>> {
        if z.len() != self.context_dim {
            return Err(Error::DimensionMismatch {
                expected: self.context_dim,
                got: z.len(),
            });
        }
        Ok(match &self.scaler {
            Some(sc) => Cow::Owned(sc.apply(z)),
            None => Cow::Borrowed(z),
        })
    }

    pub(crate) fn initial_probs_prepared(&self, z: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self.lambda_in.iter().map(|c| dot(c, z)).collect();
        softmax(&logits)
    }

    pub(crate) fn transition_probs_prepared(&self, u: usize, z: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self.lambda_tr[u].iter().map(|c| dot(c, z)).collect();
        softmax(&logits)
    }

    pub(crate) fn transition_matrix_prepared(&self, z: &[f64]) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|u| self.transition_probs_prepared(u, z))
            .collect()
    }

    pub(crate) fn dest_logits_prepared(&self, u: usize, z: &[f64]) -> Vec<f64> {
        self.lambda_eml[u].iter().map(|c| dot(c, z)).collect()
    }

    pub(crate) fn dest_probs_prepared(&self, u: usize, z: &[f64]) -> Vec<f64> {
        softmax(&self.dest_logits_prepared(u, z))
    }

    pub(crate) fn duration_mean_prepared(&self, u: usize, z: &[f64]) -> f64 {
        dot(&self.lambda_emt[u], z)
    }

    /// Log emission density of `obs` under state `u`.
    pub(crate) fn log_emission_prepared(&self, obs: &EncodedObs, u: usize, z: &[f64]) -> f64 {
        let cat = match obs.dest {
            Some(l) => {
                let logits = self.dest_logits_prepared(u, z);
                logits[l] - log_sum_exp(&logits)
            }
            None => 0.0,
        };
        cat + log_gaussian(
            obs.duration_h,
            self.duration_mean_prepared(u, z),
            self.sigma[u],
        )
    }

    /// Initial state distribution given the first context.
    pub fn initial_probs(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.initial_probs_prepared(&self.prepare(z)?))
    }

    /// Next-state distribution from previous state `u`.
    pub fn transition_probs(&self, u: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check_state(u)?;
        Ok(self.transition_probs_prepared(u, &self.prepare(z)?))
    }

    pub fn transition_matrix(&self, z: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self.transition_matrix_prepared(&self.prepare(z)?))
    }

    /// Destination distribution of state `u`, aligned with `destinations`.
    pub fn destination_probs(&self, u: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check_state(u)?;
        Ok(self.dest_probs_prepared(u, &self.prepare(z)?))
    }

    pub fn duration_mean(&self, u: usize, z: &[f64]) -> Result<f64> {
        self.check_state(u)?;
        Ok(self.duration_mean_prepared(u, &self.prepare(z)?))
    }

    /// Gaussian duration density of state `u` at `t` hours.
    pub fn duration_density(&self, u: usize, z: &[f64], t: f64) -> Result<f64> {
        let mean = self.duration_mean(u, z)?;
        Ok(log_gaussian(t, mean, self.sigma[u]).exp())
    }

    /// Joint emission density: destination mass times duration density.
    pub fn emission_prob(&self, obs: &Observation, u: usize, z: &[f64]) -> Result<f64> {
        self.check_state(u)?;
        let enc = self.encode_obs(obs)?;
        Ok(self.log_emission_prepared(&enc, u, &self.prepare(z)?).exp())
    }

    fn check_state(&self, u: usize) -> Result<()> {
        if u >= self.n_states {
            return Err(Error::InvalidParameter(format!(
                "state {u} out of range for {} states",
                self.n_states
            )));
        }
        Ok(())
    }

    /// Squared norm of all logit coefficients (the penalized part).
    pub fn logit_penalty_norm(&self) -> f64 {
        let sq = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>();
        self.lambda_in.iter().map(sq).sum::<f64>()
            + self.lambda_tr.iter().flatten().map(sq).sum::<f64>()
            + self.lambda_eml.iter().flatten().map(sq).sum::<f64>()
    }
}

pub fn log_gaussian(x: f64, mean: f64, sigma: f64) -> f64 {
    let r = (x - mean) / sigma;
    -0.5 * r * r - sigma.ln() - 0.5 * (2.0 * PI).ln()
}
