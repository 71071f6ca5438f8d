//! Two-dimensional propensity score matching (2DPSM) for repeated
//! cross-sectional data.
//!
//! A two-period survey splits into four groups: before-treated (BT),
//! before-control (BC), after-treated (AT) and after-control (AC). Matching
//! runs along the cross-sectional dimension (treated against control, on the
//! propensity score) and along the longitudinal dimension (before against
//! after, on the propensity score or Mahalanobis distance), producing four
//! equal-size groups that behave like a pseudo-panel. The treatment effect on
//! the treated is then a difference in differences of group means.
//!
//! [`simulator`] reproduces the Monte Carlo evaluation: a 15-cell scenario
//! grid crossed with five schemes.

pub mod balance;
pub mod config;
pub mod distance;
pub mod error;
pub mod estimators;
pub mod io;
pub mod matcher;
pub mod model;
pub mod propensity;
pub mod protocol;
pub mod simulator;
pub mod stats;

pub use balance::{balance_report, standardized_difference, BalanceReport, Comparison};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use estimators::{diff_in_means_did, naive_did, regression_did, regression_did_quad, Estimate};
pub use matcher::{greedy_nn_match, MatchResult, Replacement};
pub use model::{
    partition, validate_quad, GroupTag, LongitudinalMetric, MatchedPair, MatchedQuad, Observation,
    PairTag, Period, Quad, Scheme, SchemeTag,
};
pub use propensity::{fit_logistic, FitOptions, PropensityModel};
pub use protocol::{run_1d, run_2dpsm, CaliperRounds, CaliperScale, ProtocolConfig, Refit, SlicedMatch};
pub use simulator::{run_study, DgpParams, PerformanceRecord, ScenarioId};
