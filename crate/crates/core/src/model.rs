//! Domain types shared by every stage of the pipeline: observations, the
//! four-group partition of a two-period survey, matched output and the
//! matching scheme definitions.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Period {
    Before,
    After,
}

impl Period {
    pub fn code(self) -> u8 {
        match self {
            Period::Before => 0,
            Period::After => 1,
        }
    }
}

/// One survey respondent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: u64,
    pub covariates: Vec<f64>,
    pub treated: bool,
    pub period: Period,
    pub outcome: f64,
}

impl Observation {
    pub fn new(id: u64, covariates: Vec<f64>, treated: bool, period: Period, outcome: f64) -> Self {
        Self { id, covariates, treated, period, outcome }
    }

    pub fn group(&self) -> GroupTag {
        GroupTag::of(self.treated, self.period)
    }
}

/// The four cells of the treated/control by before/after design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupTag {
    BT,
    BC,
    AT,
    AC,
}

impl GroupTag {
    pub const ALL: [GroupTag; 4] = [GroupTag::BT, GroupTag::BC, GroupTag::AT, GroupTag::AC];

    pub fn of(treated: bool, period: Period) -> Self {
        match (treated, period) {
            (true, Period::Before) => GroupTag::BT,
            (false, Period::Before) => GroupTag::BC,
            (true, Period::After) => GroupTag::AT,
            (false, Period::After) => GroupTag::AC,
        }
    }

    pub fn treated(self) -> bool {
        matches!(self, GroupTag::BT | GroupTag::AT)
    }

    pub fn period(self) -> Period {
        match self {
            GroupTag::BT | GroupTag::BC => Period::Before,
            GroupTag::AT | GroupTag::AC => Period::After,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupTag::BT => "BT",
            GroupTag::BC => "BC",
            GroupTag::AT => "AT",
            GroupTag::AC => "AC",
        }
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BT" => Ok(GroupTag::BT),
            "BC" => Ok(GroupTag::BC),
            "AT" => Ok(GroupTag::AT),
            "AC" => Ok(GroupTag::AC),
            other => Err(Error::Config(format!("unknown group {other:?}"))),
        }
    }
}

/// A dataset split into before-treated, before-control, after-treated and
/// after-control groups.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub bt: Vec<Observation>,
    pub bc: Vec<Observation>,
    pub at: Vec<Observation>,
    pub ac: Vec<Observation>,
}

impl Quad {
    pub fn group(&self, tag: GroupTag) -> &[Observation] {
        match tag {
            GroupTag::BT => &self.bt,
            GroupTag::BC => &self.bc,
            GroupTag::AT => &self.at,
            GroupTag::AC => &self.ac,
        }
    }

    pub fn group_mut(&mut self, tag: GroupTag) -> &mut Vec<Observation> {
        match tag {
            GroupTag::BT => &mut self.bt,
            GroupTag::BC => &mut self.bc,
            GroupTag::AT => &mut self.at,
            GroupTag::AC => &mut self.ac,
        }
    }

    pub fn sizes(&self) -> [usize; 4] {
        [self.bt.len(), self.bc.len(), self.at.len(), self.ac.len()]
    }

    pub fn len(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Covariate dimension, taken from the first observation found.
    pub fn dimension(&self) -> Option<usize> {
        self.iter().next().map(|o| o.covariates.len())
    }

    /// Iterates BT, BC, AT, AC in that order.
    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.bt.iter().chain(&self.bc).chain(&self.at).chain(&self.ac)
    }

    pub fn into_observations(self) -> Vec<Observation> {
        let mut all = self.bt;
        all.extend(self.bc);
        all.extend(self.at);
        all.extend(self.ac);
        all
    }
}

/// Which two groups a recorded pair links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairTag {
    BtAt,
    BtBc,
    BcAc,
    AtAc,
}

impl PairTag {
    pub fn groups(self) -> (GroupTag, GroupTag) {
        match self {
            PairTag::BtAt => (GroupTag::BT, GroupTag::AT),
            PairTag::BtBc => (GroupTag::BT, GroupTag::BC),
            PairTag::BcAc => (GroupTag::BC, GroupTag::AC),
            PairTag::AtAc => (GroupTag::AT, GroupTag::AC),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairTag::BtAt => "BT:AT",
            PairTag::BtBc => "BT:BC",
            PairTag::BcAc => "BC:AC",
            PairTag::AtAc => "AT:AC",
        }
    }
}

impl fmt::Display for PairTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub tag: PairTag,
    pub reference_id: u64,
    pub pool_id: u64,
    pub distance: f64,
    pub round: usize,
}

/// Output of the iterative four-group protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedQuad {
    pub groups: Quad,
    pub pairs: Vec<MatchedPair>,
    pub rounds_used: usize,
}

impl MatchedQuad {
    /// Common group size n_m.
    pub fn group_size(&self) -> usize {
        self.groups.bt.len()
    }

    /// Total observations across the four matched groups.
    pub fn matched_size(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeTag {
    Naive,
    OneD,
    TwoD1,
    TwoD2,
    TwoD3,
}

impl SchemeTag {
    pub const ALL: [SchemeTag; 5] =
        [SchemeTag::Naive, SchemeTag::OneD, SchemeTag::TwoD1, SchemeTag::TwoD2, SchemeTag::TwoD3];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeTag::Naive => "naive",
            SchemeTag::OneD => "1d",
            SchemeTag::TwoD1 => "2d-1",
            SchemeTag::TwoD2 => "2d-2",
            SchemeTag::TwoD3 => "2d-3",
        }
    }

    pub fn is_two_dimensional(self) -> bool {
        matches!(self, SchemeTag::TwoD1 | SchemeTag::TwoD2 | SchemeTag::TwoD3)
    }
}

impl fmt::Display for SchemeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String =
            s.trim().to_ascii_lowercase().chars().filter(|c| !matches!(c, '-' | '_' | ' ')).collect();
        match norm.as_str() {
            "naive" => Ok(SchemeTag::Naive),
            "1d" | "oned" => Ok(SchemeTag::OneD),
            "2d1" | "twod1" => Ok(SchemeTag::TwoD1),
            "2d2" | "twod2" => Ok(SchemeTag::TwoD2),
            "2d3" | "twod3" => Ok(SchemeTag::TwoD3),
            _ => Err(Error::Config(format!("unknown scheme {s:?}"))),
        }
    }
}

impl Serialize for SchemeTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SchemeTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LongitudinalMetric {
    None,
    Psm,
    Mdm,
}

/// A matching scheme: which metric runs along each dimension and how wide
/// the calipers are, as multiples of the score standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scheme {
    pub tag: SchemeTag,
    pub cross_sectional_caliper: Option<f64>,
    pub longitudinal_metric: LongitudinalMetric,
    pub longitudinal_caliper: Option<f64>,
}

impl Scheme {
    pub fn defaults(tag: SchemeTag) -> Self {
        let (cross, metric, long) = match tag {
            SchemeTag::Naive => (None, LongitudinalMetric::None, None),
            SchemeTag::OneD => (Some(0.2), LongitudinalMetric::None, None),
            SchemeTag::TwoD1 => (Some(1.0), LongitudinalMetric::Mdm, None),
            SchemeTag::TwoD2 => (Some(0.2), LongitudinalMetric::Psm, Some(0.2)),
            SchemeTag::TwoD3 => (Some(1.0), LongitudinalMetric::Psm, Some(1.0)),
        };
        Self {
            tag,
            cross_sectional_caliper: cross,
            longitudinal_metric: metric,
            longitudinal_caliper: long,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in [self.cross_sectional_caliper, self.longitudinal_caliper].into_iter().flatten() {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("caliper multiplier must be positive, got {c}")));
            }
        }
        match (self.tag.is_two_dimensional(), self.longitudinal_metric) {
            (true, LongitudinalMetric::None) => Err(Error::Config(format!(
                "scheme {} needs a longitudinal metric",
                self.tag
            ))),
            (false, LongitudinalMetric::Psm | LongitudinalMetric::Mdm) => Err(Error::Config(
                format!("scheme {} does not match longitudinally", self.tag),
            )),
            _ => Ok(()),
        }
    }
}

/// Splits a dataset into its four groups, preserving input order within
/// each group.
pub fn partition(dataset: &[Observation]) -> Result<Quad> {
    let mut seen = HashSet::with_capacity(dataset.len());
    let k = dataset.first().map(|o| o.covariates.len());
    let mut quad = Quad::default();
    for obs in dataset {
        if !seen.insert(obs.id) {
            return Err(Error::DuplicateId(obs.id));
        }
        if let Some(k) = k {
            if obs.covariates.len() != k {
                return Err(Error::RaggedCovariates {
                    id: obs.id,
                    expected: k,
                    found: obs.covariates.len(),
                });
            }
        }
        quad.group_mut(obs.group()).push(obs.clone());
    }
    Ok(quad)
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuadIssue {
    EmptyGroup(GroupTag),
    MisplacedObservation { id: u64, group: GroupTag },
    DuplicateId(u64),
    CovariateLength { id: u64, expected: usize, found: usize },
    NonFiniteCovariate { id: u64, index: usize },
    NonFiniteOutcome { id: u64 },
}

impl fmt::Display for QuadIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuadIssue::EmptyGroup(g) => write!(f, "empty group {g}"),
            QuadIssue::MisplacedObservation { id, group } => {
                write!(f, "observation {id} does not belong in group {group}")
            }
            QuadIssue::DuplicateId(id) => write!(f, "duplicate id {id}"),
            QuadIssue::CovariateLength { id, expected, found } => {
                write!(f, "observation {id} has {found} covariates, expected {expected}")
            }
            QuadIssue::NonFiniteCovariate { id, index } => {
                write!(f, "observation {id} has a non-finite covariate x{}", index + 1)
            }
            QuadIssue::NonFiniteOutcome { id } => write!(f, "observation {id} has a non-finite outcome"),
        }
    }
}

/// Lists everything wrong with a quad. An empty list means it is well formed.
pub fn validate_quad(quad: &Quad) -> Vec<QuadIssue> {
    let mut issues = Vec::new();
    for tag in GroupTag::ALL {
        if quad.group(tag).is_empty() {
            issues.push(QuadIssue::EmptyGroup(tag));
        }
    }
    let k = quad.dimension();
    let mut seen = HashSet::new();
    for tag in GroupTag::ALL {
        for obs in quad.group(tag) {
            if obs.group() != tag {
                issues.push(QuadIssue::MisplacedObservation { id: obs.id, group: tag });
            }
            if !seen.insert(obs.id) {
                issues.push(QuadIssue::DuplicateId(obs.id));
            }
            if let Some(k) = k {
                if obs.covariates.len() != k {
                    issues.push(QuadIssue::CovariateLength {
                        id: obs.id,
                        expected: k,
                        found: obs.covariates.len(),
                    });
                }
            }
            if let Some(index) = obs.covariates.iter().position(|x| !x.is_finite()) {
                issues.push(QuadIssue::NonFiniteCovariate { id: obs.id, index });
            }
            if !obs.outcome.is_finite() {
                issues.push(QuadIssue::NonFiniteOutcome { id: obs.id });
            }
        }
    }
    issues
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(id: u64, treated: bool, period: Period) -> Observation {
        Observation::new(id, vec![id as f64], treated, period, 0.0)
    }

    #[test]
    fn single_before_treated_goes_to_bt() {
        let q = partition(&[obs(1, true, Period::Before)]).unwrap();
        assert_eq!(q.bt.len(), 1);
        assert_eq!(q.bt[0].id, 1);
        assert!(q.bc.is_empty() && q.at.is_empty() && q.ac.is_empty());
    }

    #[test]
    fn empty_dataset() {
        let q = partition(&[]).unwrap();
        assert!(q.is_empty());
    }

    #[test]
    fn one_per_group() {
        let data = [
            obs(1, true, Period::Before),
            obs(2, false, Period::Before),
            obs(3, true, Period::After),
            obs(4, false, Period::After),
        ];
        let q = partition(&data).unwrap();
        assert_eq!(q.sizes(), [1, 1, 1, 1]);
        assert_eq!(q.bc[0].id, 2);
        assert_eq!(q.at[0].id, 3);
        assert_eq!(q.ac[0].id, 4);
    }

    #[test]
    fn duplicate_and_ragged() {
        let data = [obs(1, true, Period::Before), obs(1, false, Period::After)];
        assert_eq!(partition(&data), Err(Error::DuplicateId(1)));
        let mut bad = obs(2, false, Period::After);
        bad.covariates.push(0.0);
        let data = [obs(1, true, Period::Before), bad];
        assert!(matches!(partition(&data), Err(Error::RaggedCovariates { id: 2, .. })));
    }

    #[test]
    fn validate_reports() {
        let data = [
            obs(1, true, Period::Before),
            obs(2, false, Period::Before),
            obs(3, true, Period::After),
            obs(4, false, Period::After),
        ];
        let q = partition(&data).unwrap();
        assert!(validate_quad(&q).is_empty());

        let mut missing = q.clone();
        missing.ac.clear();
        let issues = validate_quad(&missing);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].to_string(), "empty group AC");

        let mut nan = q.clone();
        nan.at[0].outcome = f64::NAN;
        let issues = validate_quad(&nan);
        assert_eq!(issues, vec![QuadIssue::NonFiniteOutcome { id: 3 }]);
        assert!(issues[0].to_string().contains('3'));
    }

    #[test]
    fn scheme_defaults() {
        let one = Scheme::defaults(SchemeTag::OneD);
        assert_eq!(one.cross_sectional_caliper, Some(0.2));
        assert_eq!(one.longitudinal_metric, LongitudinalMetric::None);
        let d1 = Scheme::defaults(SchemeTag::TwoD1);
        assert_eq!((d1.cross_sectional_caliper, d1.longitudinal_caliper), (Some(1.0), None));
        assert_eq!(d1.longitudinal_metric, LongitudinalMetric::Mdm);
        let d2 = Scheme::defaults(SchemeTag::TwoD2);
        assert_eq!((d2.cross_sectional_caliper, d2.longitudinal_caliper), (Some(0.2), Some(0.2)));
        let d3 = Scheme::defaults(SchemeTag::TwoD3);
        assert_eq!((d3.cross_sectional_caliper, d3.longitudinal_caliper), (Some(1.0), Some(1.0)));
        for tag in SchemeTag::ALL {
            Scheme::defaults(tag).validate().unwrap();
            assert_eq!(tag.as_str().parse::<SchemeTag>().unwrap(), tag);
        }
    }

    proptest! {
        #[test]
        fn partition_is_a_bijection(flags in prop::collection::vec((any::<bool>(), any::<bool>()), 0..40)) {
            let data: Vec<_> = flags
                .iter()
                .enumerate()
                .map(|(i, &(t, a))| obs(i as u64, t, if a { Period::After } else { Period::Before }))
                .collect();
            let q = partition(&data).unwrap();
            for tag in GroupTag::ALL {
                for o in q.group(tag) {
                    prop_assert_eq!(o.group(), tag);
                }
            }
            let mut back = q.into_observations();
            back.sort_by_key(|o| o.id);
            prop_assert_eq!(back, data);
        }
    }
}
