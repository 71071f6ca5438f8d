//! Logistic propensity model fitted by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::sample_sd;

/// Scores are clamped to `[SCORE_EPS, 1 - SCORE_EPS]`.
pub const SCORE_EPS: f64 = 1e-12;

/// A linear predictor beyond this magnitude means a fitted probability that
/// is 0 or 1 to within double precision, which only happens under separation.
const MAX_LINEAR_PREDICTOR: f64 = 35.0;

const MAX_STEP_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Sample SD of the fitted probabilities on the training pool.
    pub score_sd: f64,
    /// Sample SD of the fitted log-odds on the training pool.
    pub logit_sd: f64,
}

impl PropensityModel {
    pub fn linear_predictor(&self, covariates: &[f64]) -> Result<f64> {
        if covariates.len() != self.coefficients.len() {
            return Err(Error::DimensionMismatch {
                expected: self.coefficients.len(),
                found: covariates.len(),
            });
        }
        Ok(self.intercept + dot(&self.coefficients, covariates))
    }

    pub fn predict(&self, covariates: &[f64]) -> Result<f64> {
        self.linear_predictor(covariates).map(clamped_sigmoid)
    }
}

pub fn predict(model: &PropensityModel, covariates: &[f64]) -> Result<f64> {
    model.predict(covariates)
}

pub fn clamped_sigmoid(eta: f64) -> f64 {
    let p = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    };
    p.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bernoulli log-likelihood written in terms of the linear predictor, which
/// stays finite for any eta.
fn log_likelihood(eta: &DVector<f64>, labels: &DVector<f64>) -> f64 {
    eta.iter()
        .zip(labels.iter())
        .map(|(&e, &y)| {
            let log1pexp = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            y * e - log1pexp
        })
        .sum()
}

pub fn fit_logistic(pool: &[(&[f64], bool)], options: &FitOptions) -> Result<PropensityModel> {
    fit_logistic_traced(pool, options).map(|(m, _)| m)
}

/// Like [`fit_logistic`] but also returns the log-likelihood after every
/// accepted iteration (the first entry is the starting point at zero).
pub fn fit_logistic_traced(
    pool: &[(&[f64], bool)],
    options: &FitOptions,
) -> Result<(PropensityModel, Vec<f64>)> {
    let n = pool.len();
    if n == 0 {
        return Err(Error::EmptyPool);
    }
    let k = pool[0].0.len();
    if let Some((x, _)) = pool.iter().find(|(x, _)| x.len() != k) {
        return Err(Error::DimensionMismatch { expected: k, found: x.len() });
    }
    if pool.iter().any(|(x, _)| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Config("non-finite covariate in propensity pool".into()));
    }
    let positives = pool.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == n {
        return Err(Error::OneClassPool);
    }

    let p = k + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { pool[i].0[j - 1] });
    let labels = DVector::from_iterator(n, pool.iter().map(|(_, y)| if *y { 1.0 } else { 0.0 }));

    let mut beta = DVector::zeros(p);
    let mut eta = &design * &beta;
    let mut ll = log_likelihood(&eta, &labels);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=options.max_iter {
        iterations = iter;
        let probs = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let weights = probs.map(|q| q * (1.0 - q));
        let gradient = design.tr_mul(&(&labels - &probs));
        let mut weighted = design.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= weights[i];
        }
        let hessian = design.tr_mul(&weighted);
        let Some(chol) = hessian.cholesky() else {
            // At the zero start all weights are 1/4, so a singular Hessian
            // there is a property of the covariates alone.
            return Err(if iter == 1 { Error::SingularDesign } else { Error::Separation });
        };
        let full_step = chol.solve(&gradient);

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_STEP_HALVINGS {
            let candidate = &beta + &full_step * scale;
            let cand_eta = &design * &candidate;
            let cand_ll = log_likelihood(&cand_eta, &labels);
            if cand_ll >= ll {
                accepted = Some((candidate, cand_eta, cand_ll));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, cand_eta, cand_ll)) = accepted else {
            // No ascent possible along the Newton direction: we are at the
            // optimum to machine precision.
            converged = true;
            break;
        };
        let change = (&candidate - &beta).amax();
        beta = candidate;
        eta = cand_eta;
        ll = cand_ll;
        trace.push(ll);

        if eta.amax() > MAX_LINEAR_PREDICTOR {
            return Err(Error::Separation);
        }
        if change < options.tol {
            converged = true;
            break;
        }
    }

    let scores: Vec<f64> = eta.iter().map(|&e| clamped_sigmoid(e)).collect();
    let logits: Vec<f64> = scores.iter().map(|&s| logit(s)).collect();
    let model = PropensityModel {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        converged,
        iterations,
        score_sd: if n > 1 { sample_sd(&scores) } else { 0.0 },
        logit_sd: if n > 1 { sample_sd(&logits) } else { 0.0 },
    };
    Ok((model, trace))
}
