//! Subject-to-subject distances and caliper widths.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::stats::sample_sd;

/// Pooled covariance of two groups together with its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisContext {
    pub pooled_covariance: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub pool_size: usize,
}

impl MahalanobisContext {
    pub fn from_covariance(covariance: DMatrix<f64>, pool_size: usize) -> Result<Self> {
        if !covariance.is_square() {
            return Err(Error::DimensionMismatch {
                expected: covariance.nrows(),
                found: covariance.ncols(),
            });
        }
        let chol = covariance.clone().cholesky().ok_or(Error::SingularCovariance)?;
        // Cholesky accepts matrices that are PD only to rounding; reject
        // near-zero pivots relative to the largest.
        let diag = chol.l_dirty().diagonal();
        let max = diag.amax();
        if diag.iter().any(|d| *d <= max * 1e-7) {
            return Err(Error::SingularCovariance);
        }
        let inverse = chol.inverse();
        Ok(Self { pooled_covariance: covariance, inverse, pool_size })
    }

    pub fn dimension(&self) -> usize {
        self.inverse.nrows()
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let k = self.dimension();
        for v in [x, y] {
            if v.len() != k {
                return Err(Error::DimensionMismatch { expected: k, found: v.len() });
            }
        }
        Ok(self.distance_unchecked(x, y))
    }

    pub(crate) fn distance_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let k = self.dimension();
        let mut q = 0.0;
        for i in 0..k {
            let di = x[i] - y[i];
            let mut row = 0.0;
            for j in 0..k {
                row += self.inverse[(i, j)] * (x[j] - y[j]);
            }
            q += di * row;
        }
        q.max(0.0).sqrt()
    }
}

/// Sample covariance (n-1) of the union of two groups of covariate vectors.
pub fn pooled_covariance(group_a: &[&[f64]], group_b: &[&[f64]]) -> Result<MahalanobisContext> {
    let all: Vec<&[f64]> = group_a.iter().chain(group_b).copied().collect();
    let Some(first) = all.first() else {
        return Err(Error::SampleTooSmall { needed: 2, got: 0 });
    };
    let k = first.len();
    if let Some(v) = all.iter().find(|v| v.len() != k) {
        return Err(Error::DimensionMismatch { expected: k, found: v.len() });
    }
    let n = all.len();
    if n < k + 2 {
        return Err(Error::SampleTooSmall { needed: k + 2, got: n });
    }
    let mut means = vec![0.0; k];
    for v in &all {
        for (m, x) in means.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(k, k);
    for v in &all {
        for i in 0..k {
            let di = v[i] - means[i];
            for j in i..k {
                cov[(i, j)] += di * (v[j] - means[j]);
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            let c = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    MahalanobisContext::from_covariance(cov, n)
}

pub fn mahalanobis(x: &[f64], y: &[f64], ctx: &MahalanobisContext) -> Result<f64> {
    ctx.distance(x, y)
}

pub fn ps_distance(score_i: f64, score_j: f64) -> f64 {
    (score_i - score_j).abs()
}

/// `multiplier` times the sample SD of `scores`.
pub fn caliper_width(scores: &[f64], multiplier: f64) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::SampleTooSmall { needed: 2, got: scores.len() });
    }
    if !(multiplier.is_finite() && multiplier > 0.0) {
        return Err(Error::Config(format!("caliper multiplier must be positive, got {multiplier}")));
    }
    let sd = sample_sd(scores);
    if !(sd > 0.0) {
        return Err(Error::DegenerateScores);
    }
    Ok(multiplier * sd)
}
