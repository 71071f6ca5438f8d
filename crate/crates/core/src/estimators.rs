//! Treatment-effect estimators for the 2x2 design.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroupTag, Observation, Period, Quad};
use crate::stats::{mean, sample_variance};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Estimate {
    pub satt: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub d0: f64,
    pub d1: f64,
    pub n_used: usize,
}

impl Estimate {
    fn new(satt: f64, se: f64, d0: f64, d1: f64, n_used: usize) -> Self {
        Self { satt, se, ci_low: satt - Z_95 * se, ci_high: satt + Z_95 * se, d0, d1, n_used }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

/// Difference-in-differences of group means with an independent-means
/// standard error. A group of one contributes zero variance.
pub fn diff_in_means_did(groups: &Quad) -> Result<Estimate> {
    let mut means = [0.0; 4];
    let mut var_terms = 0.0;
    for (i, tag) in GroupTag::ALL.into_iter().enumerate() {
        let ys: Vec<f64> = groups.group(tag).iter().map(|o| o.outcome).collect();
        if ys.is_empty() {
            return Err(Error::EmptyGroup(tag));
        }
        means[i] = mean(&ys);
        var_terms += sample_variance(&ys) / ys.len() as f64;
    }
    let [bt, bc, at, ac] = means;
    let d0 = bt - bc;
    let d1 = at - ac;
    Ok(Estimate::new(d1 - d0, var_terms.sqrt(), d0, d1, groups.len()))
}

/// The unmatched estimator: difference in means on the full dataset.
pub fn naive_did(dataset: &Quad) -> Result<Estimate> {
    diff_in_means_did(dataset)
}

/// OLS of the outcome on `[1, treated, after, treated*after, x_1..x_k]`.
/// The effect is the interaction coefficient, with the classical
/// homoskedastic standard error. `d0` is the treated coefficient and `d1`
/// adds the interaction, so `satt = d1 - d0` as for the mean estimators.
pub fn regression_did(observations: &[Observation]) -> Result<Estimate> {
    let n = observations.len();
    let k = observations.first().map_or(0, |o| o.covariates.len());
    let p = 4 + k;
    if n <= p {
        return Err(Error::RankDeficientDesign);
    }
    if let Some(o) = observations.iter().find(|o| o.covariates.len() != k) {
        return Err(Error::DimensionMismatch { expected: k, found: o.covariates.len() });
    }
    let design = DMatrix::from_fn(n, p, |i, j| {
        let o = &observations[i];
        let t = if o.treated { 1.0 } else { 0.0 };
        let a = if o.period == Period::After { 1.0 } else { 0.0 };
        match j {
            0 => 1.0,
            1 => t,
            2 => a,
            3 => t * a,
            _ => o.covariates[j - 4],
        }
    });
    let y = DVector::from_iterator(n, observations.iter().map(|o| o.outcome));

    let qr = design.clone().qr();
    let r = qr.r();
    let rdiag = r.diagonal().map(f64::abs);
    let scale = rdiag.max();
    if !(scale > 0.0) || rdiag.iter().any(|d| *d <= scale * 1e-10) {
        return Err(Error::RankDeficientDesign);
    }
    let qty = qr.q().tr_mul(&y);
    let beta = r.solve_upper_triangular(&qty).ok_or(Error::RankDeficientDesign)?;
    let residuals = &y - &design * &beta;
    let sigma2 = residuals.norm_squared() / (n - p) as f64;
    // (X'X)^-1 = R^-1 R^-T; only the interaction's diagonal entry is needed.
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::RankDeficientDesign)?;
    let var = sigma2 * r_inv.row(3).norm_squared();
    let d0 = beta[1];
    let d1 = beta[1] + beta[3];
    Ok(Estimate::new(beta[3], var.sqrt(), d0, d1, n))
}

/// Regression DID on every observation of a quad.
pub fn regression_did_quad(groups: &Quad) -> Result<Estimate> {
    for tag in GroupTag::ALL {
        if groups.group(tag).is_empty() {
            return Err(Error::EmptyGroup(tag));
        }
    }
    let all: Vec<Observation> = groups.iter().cloned().collect();
    regression_did(&all)
}
