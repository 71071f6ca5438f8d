//! Standardized-difference balance diagnostics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroupTag, Quad};
use crate::stats::{mean, sample_variance};

pub const DEFAULT_BALANCE_THRESHOLD: f64 = 0.10;

/// `|mean_t - mean_c| / sqrt((s_t^2 + s_c^2) / 2)`.
pub fn standardized_difference(sample_t: &[f64], sample_c: &[f64]) -> Result<f64> {
    for s in [sample_t, sample_c] {
        if s.len() < 2 {
            return Err(Error::SampleTooSmall { needed: 2, got: s.len() });
        }
    }
    let diff = (mean(sample_t) - mean(sample_c)).abs();
    let pooled = ((sample_variance(sample_t) + sample_variance(sample_c)) / 2.0).sqrt();
    if pooled == 0.0 {
        return if diff == 0.0 { Ok(0.0) } else { Err(Error::DegenerateSamples) };
    }
    Ok(diff / pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparison {
    BtBc,
    AtAc,
    BtAt,
    BcAc,
}

impl Comparison {
    pub const ALL: [Comparison; 4] =
        [Comparison::BtBc, Comparison::AtAc, Comparison::BtAt, Comparison::BcAc];

    pub fn groups(self) -> (GroupTag, GroupTag) {
        match self {
            Comparison::BtBc => (GroupTag::BT, GroupTag::BC),
            Comparison::AtAc => (GroupTag::AT, GroupTag::AC),
            Comparison::BtAt => (GroupTag::BT, GroupTag::AT),
            Comparison::BcAc => (GroupTag::BC, GroupTag::AC),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Comparison::BtBc => "BT:BC",
            Comparison::AtAc => "AT:AC",
            Comparison::BtAt => "BT:AT",
            Comparison::BcAc => "BC:AC",
        }
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceEntry {
    pub comparison: Comparison,
    /// Zero-based covariate index.
    pub covariate: usize,
    pub delta: f64,
    pub balanced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub threshold: f64,
    pub entries: Vec<BalanceEntry>,
}

impl BalanceReport {
    pub fn deltas(&self, comparison: Comparison) -> Vec<f64> {
        self.entries.iter().filter(|e| e.comparison == comparison).map(|e| e.delta).collect()
    }

    pub fn all_balanced(&self) -> bool {
        self.entries.iter().all(|e| e.balanced)
    }
}

pub fn balance_report(groups: &Quad, threshold: f64) -> Result<BalanceReport> {
    for tag in GroupTag::ALL {
        let n = groups.group(tag).len();
        if n < 2 {
            return Err(Error::SampleTooSmall { needed: 2, got: n });
        }
    }
    let k = groups.dimension().unwrap_or(0);
    let column = |tag: GroupTag, j: usize| -> Vec<f64> {
        groups.group(tag).iter().map(|o| o.covariates[j]).collect()
    };
    let mut entries = Vec::with_capacity(4 * k);
    for comparison in Comparison::ALL {
        let (t, c) = comparison.groups();
        for j in 0..k {
            let delta = standardized_difference(&column(t, j), &column(c, j))?;
            entries.push(BalanceEntry { comparison, covariate: j, delta, balanced: delta <= threshold });
        }
    }
    Ok(BalanceReport { threshold, entries })
}
