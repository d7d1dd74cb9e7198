//! Weighted regression solvers used by the EM M-step and the baselines.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Ridge added to Gram matrices so rank-deficient designs stay solvable.
pub const GRAM_JITTER: f64 = 1e-8;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of `logits`, written into a new vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Class probabilities of a multinomial logit with coefficient rows `coefs`.
pub fn logit_probs(coefs: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = coefs.iter().map(|c| dot(c, z)).collect();
    softmax(&logits)
}

/// One training row: input `z` and sparse soft targets `(category, weight)`.
#[derive(Debug, Clone)]
pub struct SoftRow<'a> {
    pub z: &'a [f64],
    pub targets: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitOptions {
    pub l2: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for LogitOptions {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iter: 100,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitFit {
    /// `n_categories` rows of length `d`; the last row is the zero pivot.
    pub coefs: Vec<Vec<f64>>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective: f64,
}

struct LogitProblem<'a> {
    rows: &'a [SoftRow<'a>],
    k: usize,
    d: usize,
    l2: f64,
}

impl LogitProblem<'_> {
    fn n_free(&self) -> usize {
        (self.k - 1) * self.d
    }

    fn unpack(&self, theta: &DVector<f64>) -> Vec<Vec<f64>> {
        let mut coefs: Vec<Vec<f64>> = (0..self.k - 1)
            .map(|a| theta.as_slice()[a * self.d..(a + 1) * self.d].to_vec())
            .collect();
        coefs.push(vec![0.0; self.d]);
        coefs
    }

    fn logits(&self, theta: &[f64], z: &[f64], out: &mut [f64]) {
        for a in 0..self.k - 1 {
            out[a] = dot(&theta[a * self.d..(a + 1) * self.d], z);
        }
        out[self.k - 1] = 0.0;
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        let mut eta = vec![0.0; self.k];
        let mut f = 0.0;
        for row in self.rows {
            self.logits(theta, row.z, &mut eta);
            let lse = log_sum_exp(&eta);
            for &(c, w) in &row.targets {
                if w != 0.0 {
                    f += w * (eta[c] - lse);
                }
            }
        }
        f - 0.5 * self.l2 * theta.iter().map(|x| x * x).sum::<f64>()
    }

    fn gradient(&self, theta: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_free());
        let mut eta = vec![0.0; self.k];
        for row in self.rows {
            self.logits(theta, row.z, &mut eta);
            let p = softmax(&eta);
            let total: f64 = row.targets.iter().map(|t| t.1).sum();
            let mut resid: Vec<f64> = p.iter().map(|&pa| -total * pa).collect();
            for &(c, w) in &row.targets {
                resid[c] += w;
            }
            for a in 0..self.k - 1 {
                if resid[a] != 0.0 {
                    for j in 0..self.d {
                        g[a * self.d + j] += resid[a] * row.z[j];
                    }
                }
            }
        }
        for (gi, ti) in g.iter_mut().zip(theta) {
            *gi -= self.l2 * ti;
        }
        g
    }

    /// Negated Hessian of the objective (positive semidefinite). Block
    /// `(a, b)` is `Zᵀ diag(c_ab) Z` with `c_ab = w (δ_ab p_a − p_a p_b)`.
    fn neg_hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let n = self.n_free();
        let d = self.d;
        let k = self.k;
        let rows = self.rows.len();
        let design = DMatrix::from_fn(rows, d, |r, j| self.rows[r].z[j]);
        let mut probs = DMatrix::zeros(rows, k);
        let mut totals = vec![0.0; rows];
        let mut eta = vec![0.0; k];
        for (r, row) in self.rows.iter().enumerate() {
            totals[r] = row.targets.iter().map(|t| t.1).sum();
            self.logits(theta, row.z, &mut eta);
            for (a, p) in softmax(&eta).into_iter().enumerate() {
                probs[(r, a)] = p;
            }
        }
        let mut h = DMatrix::zeros(n, n);
        let mut weighted = DMatrix::zeros(rows, d);
        for a in 0..k - 1 {
            for b in a..k - 1 {
                for r in 0..rows {
                    let pa = probs[(r, a)];
                    let c = totals[r] * (if a == b { pa } else { 0.0 } - pa * probs[(r, b)]);
                    for j in 0..d {
                        weighted[(r, j)] = c * design[(r, j)];
                    }
                }
                let block = design.tr_mul(&weighted);
                h.view_mut((a * d, b * d), (d, d)).copy_from(&block);
                if a != b {
                    h.view_mut((b * d, a * d), (d, d))
                        .copy_from(&block.transpose());
                }
            }
        }
        for r in 0..n {
            h[(r, r)] += self.l2;
        }
        h
    }
}

/// Solves `h x = g` for a symmetric positive semidefinite `h`, adding
/// Levenberg damping until the Cholesky factorization succeeds.
fn damped_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = h.clone().cholesky() {
        return ch.solve(g);
    }
    let scale = (h.trace() / h.nrows().max(1) as f64).abs().max(1e-300);
    let mut mu = 1e-12 * scale;
    loop {
        let mut damped = h.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += mu;
        }
        if let Some(ch) = damped.cholesky() {
            return ch.solve(g);
        }
        mu *= 10.0;
    }
}

/// Maximizes `Σ_r Σ_c w_rc log p_c(z_r) − (l2/2)‖λ‖²` over the free
/// coefficient rows of a multinomial logit by damped Newton with Armijo
/// backtracking. The last category's coefficients stay at zero.
pub fn fit_logit_soft(
    rows: &[SoftRow<'_>],
    n_categories: usize,
    dim: usize,
    opts: &LogitOptions,
    warm_start: Option<&[Vec<f64>]>,
) -> Result<LogitFit> {
    if n_categories == 0 {
        return Err(Error::InvalidParameter(
            "logit needs at least one category".into(),
        ));
    }
    let mut total = 0.0;
    for row in rows {
        if row.z.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.z.len(),
            });
        }
        for &(c, w) in &row.targets {
            if c >= n_categories {
                return Err(Error::InvalidParameter(format!(
                    "category {c} out of range for {n_categories} categories"
                )));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidParameter(format!("invalid row weight {w}")));
            }
            total += w;
        }
    }
    if opts.l2 < 0.0 {
        return Err(Error::InvalidParameter("l2 must be non-negative".into()));
    }
    if n_categories == 1 {
        return Ok(LogitFit {
            coefs: vec![vec![0.0; dim]],
            iterations: 0,
            grad_norm: 0.0,
            objective: 0.0,
        });
    }
    if total <= 0.0 {
        return Err(Error::Precondition(
            "logit fit needs positive total weight".into(),
        ));
    }
    let problem = LogitProblem {
        rows,
        k: n_categories,
        d: dim,
        l2: opts.l2,
    };
    let mut theta = DVector::zeros(problem.n_free());
    if let Some(init) = warm_start {
        for a in 0..n_categories - 1 {
            for j in 0..dim {
                theta[a * dim + j] = init[a][j] - init[n_categories - 1][j];
            }
        }
    }
    let mut f = problem.objective(theta.as_slice());
    let mut g = problem.gradient(theta.as_slice());
    let mut iterations = 0;
    let start_norm = theta.norm();
    while g.norm() > opts.grad_tol && iterations < opts.max_iter {
        iterations += 1;
        let h = problem.neg_hessian(theta.as_slice());
        let step = damped_solve(&h, &g);
        let slope = g.dot(&step);
        // below this predicted ascent the objective cannot resolve progress
        let resolvable = slope > 1e-10 * (1.0 + f.abs());
        let mut s = 1.0;
        let mut accepted = false;
        if !resolvable {
            // judge the full step on the gradient instead
            let cand = &theta + &step;
            let gc = problem.gradient(cand.as_slice());
            if gc.norm() < g.norm() {
                f = problem.objective(cand.as_slice());
                theta = cand;
                accepted = true;
            }
        }
        for _ in 0..60 {
            if accepted {
                break;
            }
            let cand = &theta + &step * s;
            let fc = problem.objective(cand.as_slice());
            if fc.is_finite() && fc >= f + 1e-4 * s * slope {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            // no ascent left at working precision
            break;
        }
        g = problem.gradient(theta.as_slice());
        let norm = theta.norm();
        if opts.l2 == 0.0 && norm > 1e4 * (1.0 + start_norm) {
            return Err(Error::Separable { norm });
        }
    }
    if opts.l2 == 0.0 {
        let norm = theta.norm();
        if iterations >= opts.max_iter && g.norm() > opts.grad_tol {
            return Err(Error::Separable { norm });
        }
        // Without a penalty a finite optimum loses likelihood when scaled up;
        // separable data keep gaining along the ray.
        if norm > 1.0 {
            let doubled = &theta * 2.0;
            if problem.objective(doubled.as_slice()) > f + 1e-12 * f.abs() {
                return Err(Error::Separable { norm });
            }
        }
    }
    Ok(LogitFit {
        coefs: problem.unpack(&theta),
        iterations,
        grad_norm: g.norm(),
        objective: f,
    })
}

/// Hard-label convenience wrapper: rows are `(z, category, weight)`.
pub fn weighted_multinomial_logit_fit(
    rows: &[(&[f64], usize, f64)],
    n_categories: usize,
    l2: f64,
) -> Result<LogitFit> {
    let dim = rows.first().map(|r| r.0.len()).unwrap_or(0);
    let soft: Vec<SoftRow<'_>> = rows
        .iter()
        .map(|&(z, c, w)| SoftRow {
            z,
            targets: vec![(c, w)],
        })
        .collect();
    let opts = LogitOptions {
        l2,
        ..LogitOptions::default()
    };
    fit_logit_soft(&soft, n_categories, dim, &opts, None)
}

/// Gradient of the penalized logit objective at `coefs` (free rows only,
/// flattened). Exposed for verification.
pub fn logit_gradient(rows: &[SoftRow<'_>], coefs: &[Vec<f64>], l2: f64) -> Vec<f64> {
    let k = coefs.len();
    let d = coefs[0].len();
    let problem = LogitProblem { rows, k, d, l2 };
    let theta: Vec<f64> = coefs[..k - 1].iter().flatten().copied().collect();
    problem.gradient(&theta).as_slice().to_vec()
}

/// Penalized logit objective at `coefs`.
pub fn logit_objective(rows: &[SoftRow<'_>], coefs: &[Vec<f64>], l2: f64) -> f64 {
    let k = coefs.len();
    let d = coefs[0].len();
    let problem = LogitProblem { rows, k, d, l2 };
    let theta: Vec<f64> = coefs[..k - 1].iter().flatten().copied().collect();
    problem.objective(&theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WlsFit {
    pub coefs: Vec<f64>,
    pub sigma: f64,
}

/// Weighted least squares via the normal equations, plus the weighted
/// residual scale floored at `sigma_floor`.
pub fn weighted_least_squares_fit(
    z: &[&[f64]],
    t: &[f64],
    w: &[f64],
    sigma_floor: f64,
) -> Result<WlsFit> {
    if z.len() != t.len() || z.len() != w.len() {
        return Err(Error::InvalidParameter("row counts differ".into()));
    }
    let d = z.first().map(|r| r.len()).unwrap_or(0);
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Precondition(
            "least squares needs positive total weight".into(),
        ));
    }
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for ((row, &ti), &wi) in z.iter().zip(t).zip(w) {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if wi == 0.0 {
            continue;
        }
        for i in 0..d {
            rhs[i] += wi * ti * row[i];
            for j in i..d {
                gram[(i, j)] += wi * row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
        gram[(i, i)] += GRAM_JITTER;
    }
    let coefs = damped_solve(&gram, &rhs).as_slice().to_vec();
    let sse: f64 = z
        .iter()
        .zip(t)
        .zip(w)
        .map(|((row, &ti), &wi)| wi * (ti - dot(&coefs, row)).powi(2))
        .sum();
    let sigma = (sse / total).sqrt().max(sigma_floor);
    Ok(WlsFit { coefs, sigma })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsInference {
    pub coefs: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub sigma2: f64,
    pub df: usize,
    pub jittered: bool,
}

/// Ordinary least squares of `y` on the design `x` (callers include the
/// intercept column) with classical standard errors and two-sided t-tests.
pub fn ols_inference(x: &[Vec<f64>], y: &[f64]) -> Result<OlsInference> {
    let n = x.len();
    let p = x.first().map(|r| r.len()).unwrap_or(0);
    if n != y.len() {
        return Err(Error::InvalidParameter("row counts differ".into()));
    }
    if n <= p {
        return Err(Error::Precondition(format!(
            "OLS needs more rows ({n}) than columns ({p})"
        )));
    }
    let xm = DMatrix::from_fn(n, p, |i, j| x[i][j]);
    let yv = DVector::from_column_slice(y);
    let mut xtx = xm.transpose() * &xm;
    let eig = xtx.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let jittered = !(min > 1e-12 * max.abs());
    if jittered {
        log::warn!("collinear regression design; adding ridge jitter {GRAM_JITTER}");
        for i in 0..p {
            xtx[(i, i)] += GRAM_JITTER;
        }
    }
    let inv = xtx
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Precondition("singular design".into()))?;
    let beta = &inv * (xm.transpose() * &yv);
    let resid = &yv - &xm * &beta;
    let df = n - p;
    let sigma2 = resid.norm_squared() / df as f64;
    let dist =
        StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut std_errors = Vec::with_capacity(p);
    let mut t_values = Vec::with_capacity(p);
    let mut p_values = Vec::with_capacity(p);
    for j in 0..p {
        let se = (sigma2 * inv[(j, j)]).max(0.0).sqrt();
        let t = if se > 0.0 {
            beta[j] / se
        } else {
            f64::INFINITY
        };
        let pv = if t.is_finite() {
            2.0 * (1.0 - dist.cdf(t.abs()))
        } else {
            0.0
        };
        std_errors.push(se);
        t_values.push(t);
        p_values.push(pv);
    }
    Ok(OlsInference {
        coefs: beta.as_slice().to_vec(),
        std_errors,
        t_values,
        p_values,
        sigma2,
        df,
        jittered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn balanced_binary_data_gives_zero_coefficients() {
        let z = [vec![1.0, 1.0], vec![-1.0, 1.0]];
        let rows: Vec<(&[f64], usize, f64)> = vec![
            (&z[0], 0, 1.0),
            (&z[0], 1, 1.0),
            (&z[1], 0, 1.0),
            (&z[1], 1, 1.0),
        ];
        let fit = weighted_multinomial_logit_fit(&rows, 2, 1e-4).unwrap();
        for c in fit.coefs.iter().flatten() {
            assert!(c.abs() < 1e-9);
        }
    }

    #[test]
    fn separable_data_without_penalty_is_reported() {
        let z = [vec![1.0, 1.0], vec![-1.0, 1.0]];
        let rows: Vec<(&[f64], usize, f64)> = vec![(&z[0], 0, 1.0), (&z[1], 1, 1.0)];
        let err = weighted_multinomial_logit_fit(&rows, 2, 0.0).unwrap_err();
        assert!(matches!(err, Error::Separable { .. }), "{err}");
        // the same data with a penalty is fine
        let fit = weighted_multinomial_logit_fit(&rows, 2, 1e-2).unwrap();
        assert!(fit.grad_norm <= 1e-6);
    }

    #[test]
    fn zero_weight_is_an_error() {
        let z = [vec![1.0]];
        let rows: Vec<(&[f64], usize, f64)> = vec![(&z[0], 0, 0.0)];
        assert!(weighted_multinomial_logit_fit(&rows, 2, 1e-4).is_err());
        let rows: Vec<(&[f64], usize, f64)> = vec![(&z[0], 0, -1.0)];
        assert!(weighted_multinomial_logit_fit(&rows, 2, 1e-4).is_err());
    }

    #[test]
    fn wls_reduces_to_ols_with_equal_weights() {
        let z: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![1.0, i as f64, (i * i) as f64 * 0.1])
            .collect();
        let t: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64).collect();
        let zr: Vec<&[f64]> = z.iter().map(|r| r.as_slice()).collect();
        let a = weighted_least_squares_fit(&zr, &t, &[1.0; 20], 0.0).unwrap();
        let b = weighted_least_squares_fit(&zr, &t, &[3.5; 20], 0.0).unwrap();
        for (x, y) in a.coefs.iter().zip(&b.coefs) {
            assert!((x - y).abs() < 1e-8);
        }
        let x: Vec<Vec<f64>> = z.clone();
        let ols = ols_inference(&x, &t).unwrap();
        for (x, y) in a.coefs.iter().zip(&ols.coefs) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn wls_exact_data_hits_the_floor() {
        let z: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![1.0, i as f64 * 0.3, ((i % 4) as f64)])
            .collect();
        let t: Vec<f64> = z.iter().map(|r| 0.5 - 1.25 * r[1] + 2.0 * r[2]).collect();
        let zr: Vec<&[f64]> = z.iter().map(|r| r.as_slice()).collect();
        let w: Vec<f64> = (0..30).map(|i| 0.5 + (i % 3) as f64).collect();
        let fit = weighted_least_squares_fit(&zr, &t, &w, 1e-3).unwrap();
        assert!((fit.coefs[0] - 0.5).abs() < 1e-8);
        assert!((fit.coefs[1] + 1.25).abs() < 1e-8);
        assert!((fit.coefs[2] - 2.0).abs() < 1e-8);
        assert_eq!(fit.sigma, 1e-3);
    }

    #[test]
    fn wls_rank_deficient_is_solvable() {
        // duplicated column
        let z: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let t: Vec<f64> = (0..10).map(|i| 2.0 * i as f64).collect();
        let zr: Vec<&[f64]> = z.iter().map(|r| r.as_slice()).collect();
        let fit = weighted_least_squares_fit(&zr, &t, &[1.0; 10], 0.0).unwrap();
        assert!((fit.coefs[0] + fit.coefs[1] - 2.0).abs() < 1e-6);
    }
}
