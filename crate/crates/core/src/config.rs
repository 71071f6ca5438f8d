//! JSON run configuration.
//!
//! Every key is optional; unknown keys are rejected.
//!
//! ```json
//! {
//!   "dgp": { "pool_size": 100000, "replications": 500 },
//!   "schemes": [
//!     { "tag": "2d-2", "cross_sectional_caliper": 0.25,
//!       "longitudinal_metric": "psm", "longitudinal_caliper": 0.25 }
//!   ],
//!   "balance_threshold": 0.1,
//!   "max_rounds": 20,
//!   "caliper_scale": "probability",
//!   "replacement": "without",
//!   "refit": "first_round",
//!   "caliper_rounds": "first_round",
//!   "threads": 8
//! }
//! ```

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::balance::DEFAULT_BALANCE_THRESHOLD;
use crate::error::{Error, Result};
use crate::matcher::Replacement;
use crate::model::Scheme;
use crate::protocol::{CaliperRounds, CaliperScale, Refit};
use crate::simulator::{DgpParams, MatchingSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dgp: DgpParams,
    /// Overrides for the default scheme table; unlisted schemes keep their defaults.
    pub schemes: Vec<Scheme>,
    pub balance_threshold: f64,
    pub max_rounds: usize,
    pub caliper_scale: CaliperScale,
    pub replacement: Replacement,
    pub refit: Refit,
    pub caliper_rounds: CaliperRounds,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dgp: DgpParams::default(),
            schemes: Vec::new(),
            balance_threshold: DEFAULT_BALANCE_THRESHOLD,
            max_rounds: 20,
            caliper_scale: CaliperScale::Probability,
            replacement: Replacement::Without,
            refit: Refit::FirstRound,
            caliper_rounds: CaliperRounds::FirstRound,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        let mut seen = HashSet::new();
        for s in &self.schemes {
            s.validate()?;
            if !seen.insert(s.tag) {
                return Err(Error::Config(format!("scheme {} listed twice", s.tag)));
            }
        }
        if !(self.balance_threshold.is_finite() && self.balance_threshold > 0.0) {
            return Err(Error::Config("balance_threshold must be positive".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn matching(&self) -> MatchingSettings {
        let mut settings = MatchingSettings {
            max_rounds: self.max_rounds,
            caliper_scale: self.caliper_scale,
            replacement: self.replacement,
            refit: self.refit,
            caliper_rounds: self.caliper_rounds,
            ..MatchingSettings::default()
        };
        for s in &self.schemes {
            if let Some(slot) = settings.schemes.iter_mut().find(|d| d.tag == s.tag) {
                *slot = *s;
            }
        }
        settings
    }
}
