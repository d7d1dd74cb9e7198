//! Expectation-maximization for the IOHMM.
//!
//! The M-step splits into independent weighted problems: a soft-label logit
//! for the initial model, one per previous state for transitions, one per
//! state for destinations, and a weighted least-squares fit per state for the
//! duration mean with the weighted residual scale as its deviation. Logit fits
//! are warm-started from the current parameters and only accept ascent steps,
//! so the penalized objective never decreases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::inference::{forward_backward, EncodedDay, ObservedDay, PosteriorTables};
use super::model::{ContextScaler, IohmmModel};
use crate::error::{Error, Result};
use crate::geo::CellId;
use crate::regression::{fit_logit_soft, weighted_least_squares_fit, LogitOptions, SoftRow};

/// Posterior mass below which a state counts as empty support.
const EMPTY_SUPPORT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub l2: f64,
    pub sigma_floor: f64,
    /// Random-responsibility restarts in addition to the hinted start.
    pub random_restarts: usize,
    /// Further random starts that run only `screen_iter` iterations; the best
    /// `1 + random_restarts` of all starts continue to convergence.
    pub screen_restarts: usize,
    pub screen_iter: usize,
    /// Z-score the continuous context features before fitting.
    pub standardize: bool,
    /// Context columns standardized when `standardize` is set.
    pub standardize_columns: Vec<usize>,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-4,
            l2: 1e-4,
            sigma_floor: 0.01,
            random_restarts: 1,
            screen_restarts: 8,
            screen_iter: 10,
            standardize: false,
            standardize_columns: (4..10).collect(),
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.screen_restarts > 0 && self.screen_iter == 0 {
            return Err(Error::InvalidParameter(
                "em screen_iter must be positive when screening".into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter(
                "em max_iter must be positive".into(),
            ));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidParameter(
                "em rel_tol must be positive".into(),
            ));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::InvalidParameter("em l2 must be non-negative".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::InvalidParameter(
                "em sigma_floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub penalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmRun {
    /// `"hint"` or `"random-<k>"`.
    pub start: String,
    pub iterations: Vec<EmIteration>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmFit {
    pub model: IohmmModel,
    /// The run whose model was kept.
    pub best: EmRun,
    pub runs: Vec<EmRun>,
}

impl EmFit {
    pub fn final_log_likelihood(&self) -> f64 {
        self.best
            .iterations
            .last()
            .map(|it| it.log_likelihood)
            .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Responsibilities smoothed from hard labels: 0.9 on the label, the rest
/// spread evenly.
pub fn smoothed_responsibilities(labels: &[usize], n_states: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&l| {
            if n_states == 1 {
                return vec![1.0];
            }
            let off = 0.1 / (n_states - 1) as f64;
            (0..n_states)
                .map(|u| if u == l { 0.9 } else { off })
                .collect()
        })
        .collect()
}

fn random_responsibilities(n: usize, n_states: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..n_states).map(|_| gamma.sample(rng) + 1e-3).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Posterior-like tables from per-activity responsibilities, treating
/// consecutive activities as independent.
fn tables_from_responsibilities(days: &[EncodedDay], resp: &[Vec<f64>]) -> Vec<PosteriorTables> {
    let mut k = 0;
    days.iter()
        .map(|d| {
            let gamma: Vec<Vec<f64>> = resp[k..k + d.len()].to_vec();
            k += d.len();
            let xi = (1..gamma.len())
                .map(|i| {
                    gamma[i - 1]
                        .iter()
                        .map(|&a| gamma[i].iter().map(|&b| a * b).collect())
                        .collect()
                })
                .collect();
            PosteriorTables {
                alpha: Vec::new(),
                beta: Vec::new(),
                gamma,
                xi,
                log_likelihood: f64::NAN,
                log_scaling: Vec::new(),
            }
        })
        .collect()
}

/// Maximizes the expected complete-data log-likelihood (minus the logit
/// penalty) given posteriors, starting from `current`.
pub fn m_step(
    current: &IohmmModel,
    days: &[EncodedDay],
    posteriors: &[PosteriorTables],
    l2: f64,
) -> Result<IohmmModel> {
    let h = current.n_states;
    let d = current.context_dim;
    let n_dest = current.n_destinations();
    let opts = LogitOptions {
        l2,
        ..LogitOptions::default()
    };
    let mut next = current.clone();

    let init_rows: Vec<SoftRow<'_>> = days
        .iter()
        .zip(posteriors)
        .map(|(day, post)| SoftRow {
            z: &day.contexts[0],
            targets: post.gamma[0].iter().copied().enumerate().collect(),
        })
        .collect();
    next.lambda_in = fit_logit_soft(&init_rows, h, d, &opts, Some(&current.lambda_in))?.coefs;

    for u in 0..h {
        let rows: Vec<SoftRow<'_>> = days
            .iter()
            .zip(posteriors)
            .flat_map(|(day, post)| {
                post.xi.iter().enumerate().map(move |(k, x)| SoftRow {
                    z: &day.contexts[k + 1],
                    targets: x[u].iter().copied().enumerate().collect(),
                })
            })
            .collect();
        let mass: f64 = rows
            .iter()
            .flat_map(|r| r.targets.iter().map(|t| t.1))
            .sum();
        if mass > EMPTY_SUPPORT {
            next.lambda_tr[u] =
                fit_logit_soft(&rows, h, d, &opts, Some(&current.lambda_tr[u]))?.coefs;
        }
    }

    for u in 0..h {
        let mut dest_rows = Vec::new();
        let mut zs: Vec<&[f64]> = Vec::new();
        let mut ts = Vec::new();
        let mut ws = Vec::new();
        for (day, post) in days.iter().zip(posteriors) {
            for (i, obs) in day.obs.iter().enumerate() {
                let w = post.gamma[i][u];
                let z = day.contexts[i].as_slice();
                if let Some(l) = obs.dest {
                    dest_rows.push(SoftRow {
                        z,
                        targets: vec![(l, w)],
                    });
                }
                zs.push(z);
                ts.push(obs.duration_h);
                ws.push(w);
            }
        }
        let mass: f64 = ws.iter().sum();
        if mass <= EMPTY_SUPPORT {
            log::warn!("state {u} has empty posterior support; its emissions are frozen");
            continue;
        }
        let dest_mass: f64 = dest_rows.iter().map(|r| r.targets[0].1).sum();
        if dest_mass > EMPTY_SUPPORT {
            next.lambda_eml[u] =
                fit_logit_soft(&dest_rows, n_dest, d, &opts, Some(&current.lambda_eml[u]))?.coefs;
        }
        let wls = weighted_least_squares_fit(&zs, &ts, &ws, current.sigma_floor)?;
        next.lambda_emt[u] = wls.coefs;
        next.sigma[u] = wls.sigma;
    }
    Ok(next)
}

fn e_step(
    model: &IohmmModel,
    days: &[EncodedDay],
    l2: f64,
) -> Result<(Vec<PosteriorTables>, f64, f64)> {
    let posts = forward_backward(model, days)?;
    let ll: f64 = posts.iter().map(|p| p.log_likelihood).sum();
    let penalized = ll - 0.5 * l2 * model.logit_penalty_norm();
    Ok((posts, ll, penalized))
}

fn run_em(
    start: String,
    init: IohmmModel,
    days: &[EncodedDay],
    resp: Option<&[Vec<f64>]>,
    config: &EmConfig,
) -> Result<(IohmmModel, EmRun)> {
    let mut model = match resp {
        Some(r) => m_step(
            &init,
            days,
            &tables_from_responsibilities(days, r),
            config.l2,
        )?,
        None => init,
    };
    let mut iterations = Vec::new();
    let mut converged = false;
    let (mut posts, mut ll, mut pen) = e_step(&model, days, config.l2)?;
    for iteration in 0..config.max_iter {
        if !ll.is_finite() || !pen.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                detail: format!("log-likelihood {ll}, penalized {pen}"),
            });
        }
        iterations.push(EmIteration {
            iteration,
            log_likelihood: ll,
            penalized: pen,
        });
        let candidate = m_step(&model, days, &posts, config.l2)?;
        let (next_posts, next_ll, next_pen) = e_step(&candidate, days, config.l2)?;
        if !next_pen.is_finite() {
            return Err(Error::NonFinite {
                iteration: iteration + 1,
                detail: format!("log-likelihood {next_ll}, penalized {next_pen}"),
            });
        }
        let gain = next_pen - pen;
        if gain < -1e-8 * pen.abs().max(1.0) {
            log::warn!(
                "{start}: penalized objective fell by {:.3e} at iteration {}",
                -gain,
                iteration + 1
            );
        }
        model = candidate;
        posts = next_posts;
        ll = next_ll;
        pen = next_pen;
        if gain.abs() <= config.rel_tol * iterations[iterations.len() - 1].penalized.abs() {
            converged = true;
            iterations.push(EmIteration {
                iteration: iteration + 1,
                log_likelihood: ll,
                penalized: pen,
            });
            break;
        }
    }
    if !converged {
        iterations.push(EmIteration {
            iteration: config.max_iter,
            log_likelihood: ll,
            penalized: pen,
        });
    }
    Ok((
        model,
        EmRun {
            start,
            iterations,
            converged,
        },
    ))
}

fn final_penalized(run: &EmRun) -> f64 {
    run.iterations
        .last()
        .map_or(f64::NEG_INFINITY, |i| i.penalized)
}

/// Resumes a truncated run; its log continues the numbering.
fn continue_run(
    model: IohmmModel,
    run: EmRun,
    days: &[EncodedDay],
    config: &EmConfig,
) -> Result<(IohmmModel, EmRun)> {
    let done = run.iterations.len() - 1;
    let rest = EmConfig {
        max_iter: config.max_iter - done,
        ..config.clone()
    };
    let (model, more) = run_em(run.start.clone(), model, days, None, &rest)?;
    let mut iterations = run.iterations;
    iterations.extend(more.iterations.into_iter().skip(1).map(|mut it| {
        it.iteration += done;
        it
    }));
    Ok((
        model,
        EmRun {
            start: run.start,
            iterations,
            converged: more.converged,
        },
    ))
}

/// Runs EM from an existing model (its destination set, scaler and state
/// count are kept).
pub fn em_refine(init: &IohmmModel, days: &[ObservedDay], config: &EmConfig) -> Result<EmFit> {
    config.validate()?;
    let encoded = days
        .iter()
        .filter(|d| !d.observations.is_empty())
        .map(|d| init.encode_day(d, false))
        .collect::<Result<Vec<_>>>()?;
    if encoded.is_empty() {
        return Err(Error::Precondition(
            "EM needs at least one non-empty day".into(),
        ));
    }
    let (model, run) = run_em("given".into(), init.clone(), &encoded, None, config)?;
    Ok(EmFit {
        model,
        best: run.clone(),
        runs: vec![run],
    })
}

/// Fits an IOHMM with `n_states` hidden states to `days`.
///
/// `hints` optionally gives one hard state label per activity (days in
/// order); it seeds the first run with smoothed responsibilities. Each random
/// restart starts from Dirichlet responsibilities. With screening, every
/// start first runs `screen_iter` iterations and only the leaders continue.
/// The run with the highest final penalized objective is kept.
pub fn em_fit(
    days: &[ObservedDay],
    n_states: usize,
    hints: Option<&[usize]>,
    config: &EmConfig,
) -> Result<EmFit> {
    config.validate()?;
    if n_states == 0 {
        return Err(Error::InvalidParameter("n_states must be positive".into()));
    }
    let days: Vec<&ObservedDay> = days.iter().filter(|d| !d.observations.is_empty()).collect();
    if days.is_empty() {
        return Err(Error::Precondition(
            "EM needs at least one non-empty day".into(),
        ));
    }
    let dim = days[0].contexts[0].len();
    let mut cells: Vec<CellId> = days
        .iter()
        .flat_map(|d| d.observations.iter().map(|o| o.cell))
        .collect();
    cells.sort();
    cells.dedup();
    let mut template = IohmmModel::zeros(n_states, cells, dim, config.sigma_floor);
    if config.standardize {
        let scaler = ContextScaler::fit(
            days.iter().flat_map(|d| {
                d.contexts[..d.observations.len()]
                    .iter()
                    .map(|z| z.as_slice())
            }),
            dim,
            &config.standardize_columns,
        );
        template.scaler = Some(scaler);
    }
    let encoded = days
        .iter()
        .map(|d| template.encode_day(d, false))
        .collect::<Result<Vec<_>>>()?;
    let n_obs: usize = encoded.iter().map(|d| d.len()).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut starts: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    if let Some(labels) = hints {
        if labels.len() != n_obs {
            return Err(Error::InvalidParameter(format!(
                "{} state hints for {n_obs} activities",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_states) {
            return Err(Error::InvalidParameter(format!(
                "state hint {bad} out of range"
            )));
        }
        starts.push(("hint".into(), smoothed_responsibilities(labels, n_states)));
    }
    let n_full = if hints.is_some() {
        config.random_restarts
    } else {
        config.random_restarts.max(1)
    };
    let n_random = n_full + config.screen_restarts;
    for k in 0..n_random {
        // draw each restart from its own stream so adding restarts does not
        // perturb earlier ones
        let mut sub = ChaCha8Rng::seed_from_u64(rng.random::<u64>());
        starts.push((
            format!("random-{k}"),
            random_responsibilities(n_obs, n_states, &mut sub),
        ));
    }

    let n_keep = starts.len().min(n_full + usize::from(hints.is_some()));
    let mut runs = Vec::new();
    let mut pending: Vec<(IohmmModel, EmRun)> = Vec::new();
    if config.screen_restarts > 0 && config.screen_iter < config.max_iter {
        let short = EmConfig {
            max_iter: config.screen_iter,
            ..config.clone()
        };
        let mut screened = Vec::with_capacity(starts.len());
        for (name, resp) in &starts {
            screened.push(run_em(
                name.clone(),
                template.clone(),
                &encoded,
                Some(resp),
                &short,
            )?);
        }
        // stable sort keeps start order among equal scores
        let mut order: Vec<usize> = (0..screened.len()).collect();
        order.sort_by(|&a, &b| {
            final_penalized(&screened[b].1).total_cmp(&final_penalized(&screened[a].1))
        });
        let keep = &order[..n_keep];
        for (i, (model, run)) in screened.into_iter().enumerate() {
            if run.converged || !keep.contains(&i) {
                runs.push(run.clone());
                if run.converged && keep.contains(&i) {
                    pending.push((model, run));
                }
            } else {
                let (model, run) = continue_run(model, run, &encoded, config)?;
                runs.push(run.clone());
                pending.push((model, run));
            }
        }
    } else {
        for (name, resp) in starts {
            let (model, run) = run_em(name, template.clone(), &encoded, Some(&resp), config)?;
            runs.push(run.clone());
            pending.push((model, run));
        }
    }
    let mut best: Option<(IohmmModel, EmRun)> = None;
    for (model, run) in pending {
        if best
            .as_ref()
            .map_or(true, |(_, b)| final_penalized(&run) > final_penalized(b))
        {
            best = Some((model, run));
        }
    }
    let (model, best) = best.expect("at least one start");
    Ok(EmFit { model, best, runs })
}
