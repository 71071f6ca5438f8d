//! Monte Carlo harness: data-generating process, the 15-cell scenario grid,
//! replication runner and performance metrics.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{diff_in_means_did, naive_did, regression_did_quad, Estimate};
use crate::matcher::Replacement;
use crate::model::{GroupTag, Observation, Period, Quad, Scheme, SchemeTag};
use crate::protocol::{run_1d, run_2dpsm, CaliperRounds, CaliperScale, ProtocolConfig, Refit};
use crate::propensity::FitOptions;
use crate::stats::{mean, median, sample_sd};

/// Parameters of the data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpParams {
    /// Row-major covariate covariance matrix.
    pub covariance: Vec<Vec<f64>>,
    pub mean_bt: Vec<f64>,
    /// Mean of both control groups.
    pub mean_control: Vec<f64>,
    /// After-period treated means, indexed by scenario level.
    pub mean_at_levels: Vec<Vec<f64>>,
    pub treatment_effect: f64,
    pub outcome_beta: Vec<f64>,
    pub error_variance: f64,
    pub pool_size: usize,
    pub n_per_period: usize,
    /// Treated observations per period for prevalence letters A, B, C.
    pub treated_per_period: [usize; 3],
    pub replications: usize,
}

impl Default for DgpParams {
    fn default() -> Self {
        let mut covariance = vec![vec![0.2; 4]; 4];
        for (i, row) in covariance.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for (i, j) in [(0, 1), (2, 3)] {
            covariance[i][j] = 0.9;
            covariance[j][i] = 0.9;
        }
        Self {
            covariance,
            mean_bt: vec![0.1; 4],
            mean_control: vec![0.0; 4],
            mean_at_levels: [0.1, 0.3, 0.5, 1.0, 2.0].iter().map(|&s| vec![s; 4]).collect(),
            treatment_effect: 0.6,
            outcome_beta: [1.25f64, 1.5, 1.75, 2.0].iter().map(|c| c.ln()).collect(),
            error_variance: 0.5,
            pool_size: 100_000,
            n_per_period: 1000,
            treated_per_period: [100, 300, 500],
            replications: 1000,
        }
    }
}

impl DgpParams {
    pub fn dimension(&self) -> usize {
        self.outcome_beta.len()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let k = self.covariance.len();
        DMatrix::from_fn(k, k, |i, j| self.covariance[i].get(j).copied().unwrap_or(f64::NAN))
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dimension();
        let bad = |m: String| Err(Error::Config(m));
        if k == 0 {
            return bad("outcome_beta must not be empty".into());
        }
        if self.covariance.len() != k || self.covariance.iter().any(|r| r.len() != k) {
            return bad(format!("covariance must be {k}x{k}"));
        }
        let cov = self.covariance_matrix();
        if cov.iter().any(|v| !v.is_finite()) || (&cov - cov.transpose()).amax() > 1e-12 {
            return bad("covariance must be finite and symmetric".into());
        }
        if cov.cholesky().is_none() {
            return Err(Error::SingularCovariance);
        }
        for (name, v) in [("mean_bt", &self.mean_bt), ("mean_control", &self.mean_control)] {
            if v.len() != k {
                return bad(format!("{name} must have length {k}"));
            }
        }
        if self.mean_at_levels.len() != 5 || self.mean_at_levels.iter().any(|v| v.len() != k) {
            return bad(format!("mean_at_levels must hold 5 vectors of length {k}"));
        }
        if !(self.error_variance >= 0.0) || !self.treatment_effect.is_finite() || self.treatment_effect == 0.0 {
            return bad("error_variance must be >= 0 and treatment_effect finite and non-zero".into());
        }
        if self.treated_per_period.iter().any(|&t| t == 0 || t >= self.n_per_period) {
            return bad("each treated_per_period must lie strictly between 0 and n_per_period".into());
        }
        let largest = self.treated_per_period.iter().map(|&t| t.max(self.n_per_period - t)).max().unwrap_or(0);
        if self.pool_size < largest {
            return bad(format!("pool_size must be at least {largest}"));
        }
        if self.replications == 0 {
            return bad("replications must be positive".into());
        }
        Ok(())
    }

    /// Expected outcome given covariates, before the error term.
    pub fn systematic_outcome(&self, x: &[f64], treated: bool, period: Period) -> f64 {
        let effect = if treated && period == Period::After { self.treatment_effect } else { 0.0 };
        effect + x.iter().zip(&self.outcome_beta).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Prevalence {
    /// Control : treated = 9 : 1.
    A,
    /// 7 : 3.
    B,
    /// 1 : 1.
    C,
}

impl Prevalence {
    pub const ALL: [Prevalence; 3] = [Prevalence::A, Prevalence::B, Prevalence::C];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One cell of the grid: prevalence letter and covariate-shift level 0..=4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScenarioId {
    pub letter: Prevalence,
    pub level: u8,
}

impl ScenarioId {
    pub fn new(letter: Prevalence, level: u8) -> Result<Self> {
        if level > 4 {
            return Err(Error::Config(format!("scenario level {level} out of range 0..=4")));
        }
        Ok(Self { letter, level })
    }

    pub fn all() -> Vec<ScenarioId> {
        Prevalence::ALL
            .into_iter()
            .flat_map(|letter| (0..5).map(move |level| ScenarioId { letter, level }))
            .collect()
    }

    /// Position in [`ScenarioId::all`].
    pub fn ordinal(self) -> usize {
        self.letter.index() * 5 + self.level as usize
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}{}", self.letter, self.level)
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::Config(format!("unknown scenario {s:?}"));
        let s = s.trim();
        let mut chars = s.chars();
        let letter = match chars.next().map(|c| c.to_ascii_uppercase()) {
            Some('A') => Prevalence::A,
            Some('B') => Prevalence::B,
            Some('C') => Prevalence::C,
            _ => return Err(unknown()),
        };
        let level: u8 = chars.as_str().parse().map_err(|_| unknown())?;
        ScenarioId::new(letter, level).map_err(|_| unknown())
    }
}

impl Serialize for ScenarioId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScenarioId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Draws `n` vectors from N(mean, covariance) via the Cholesky factor.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &[f64],
    covariance: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let k = mean.len();
    if covariance.nrows() != k || covariance.ncols() != k {
        return Err(Error::DimensionMismatch { expected: k, found: covariance.nrows() });
    }
    let chol = covariance.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let l = chol.l();
    let mut z = vec![0.0; k];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        z.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        let x: Vec<f64> = (0..k)
            .map(|i| mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>())
            .collect();
        out.push(x);
    }
    Ok(out)
}

pub fn generate_outcome<R: Rng + ?Sized>(
    x: &[f64],
    treated: bool,
    period: Period,
    params: &DgpParams,
    rng: &mut R,
) -> f64 {
    let noise = Normal::new(0.0, params.error_variance.sqrt())
        .map(|d| d.sample(rng))
        .unwrap_or(0.0);
    params.systematic_outcome(x, treated, period) + noise
}

/// Pre-generated rows for one group.
#[derive(Debug, Clone)]
pub struct GroupPool {
    pub covariates: Vec<Vec<f64>>,
    pub outcomes: Vec<f64>,
}

/// One pool per group for one scenario.
#[derive(Debug, Clone)]
pub struct ScenarioPools {
    pub scenario: ScenarioId,
    pools: [GroupPool; 4],
}

impl ScenarioPools {
    pub fn generate<R: Rng + ?Sized>(scenario: ScenarioId, params: &DgpParams, rng: &mut R) -> Result<Self> {
        let cov = params.covariance_matrix();
        let mut make = |tag: GroupTag| -> Result<GroupPool> {
            let mean = match tag {
                GroupTag::BT => &params.mean_bt,
                GroupTag::AT => &params.mean_at_levels[scenario.level as usize],
                GroupTag::BC | GroupTag::AC => &params.mean_control,
            };
            let covariates = sample_mvn(mean, &cov, params.pool_size, rng)?;
            let outcomes = covariates
                .iter()
                .map(|x| generate_outcome(x, tag.treated(), tag.period(), params, rng))
                .collect();
            Ok(GroupPool { covariates, outcomes })
        };
        let pools = [make(GroupTag::BT)?, make(GroupTag::BC)?, make(GroupTag::AT)?, make(GroupTag::AC)?];
        Ok(Self { scenario, pools })
    }

    pub fn pool(&self, tag: GroupTag) -> &GroupPool {
        &self.pools[tag as usize]
    }
}

/// Group sizes for a scenario: treated count per period, then controls.
pub fn group_sizes(scenario: ScenarioId, params: &DgpParams) -> [usize; 4] {
    let t = params.treated_per_period[scenario.letter.index()];
    let c = params.n_per_period - t;
    [t, c, t, c]
}

/// Samples one dataset without replacement from each group pool. Ids are
/// `id_base + 0..n`, so draws with different bases never share ids.
pub fn draw_dataset<R: Rng + ?Sized>(
    scenario: ScenarioId,
    params: &DgpParams,
    pools: &ScenarioPools,
    id_base: u64,
    rng: &mut R,
) -> Result<Quad> {
    let sizes = group_sizes(scenario, params);
    let mut quad = Quad::default();
    let mut next_id = id_base;
    for (tag, &count) in GroupTag::ALL.iter().zip(&sizes) {
        let pool = pools.pool(*tag);
        let available = pool.outcomes.len();
        if count > available {
            return Err(Error::PoolExhausted { group: *tag, requested: count, available });
        }
        let group = quad.group_mut(*tag);
        for row in index::sample(rng, available, count) {
            group.push(Observation::new(
                next_id,
                pool.covariates[row].clone(),
                tag.treated(),
                tag.period(),
                pool.outcomes[row],
            ));
            next_id += 1;
        }
    }
    Ok(quad)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of stream identifiers.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

const STREAM_POOL: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_MATCH: u64 = 3;

pub fn pool_seed(master: u64, scenario: ScenarioId) -> u64 {
    derive_seed(master, &[STREAM_POOL, scenario.ordinal() as u64])
}

pub fn data_seed(master: u64, scenario: ScenarioId, replication: usize) -> u64 {
    derive_seed(master, &[STREAM_DATA, scenario.ordinal() as u64, replication as u64])
}

pub fn match_seed(master: u64, scenario: ScenarioId, scheme: SchemeTag, replication: usize) -> u64 {
    derive_seed(master, &[STREAM_MATCH, scenario.ordinal() as u64, scheme as u64, replication as u64])
}

/// Matching settings shared by every scheme in a study.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingSettings {
    pub schemes: Vec<Scheme>,
    pub max_rounds: usize,
    pub caliper_scale: CaliperScale,
    pub replacement: Replacement,
    pub refit: Refit,
    pub caliper_rounds: CaliperRounds,
}

impl Default for MatchingSettings {
    fn default() -> Self {
        Self {
            schemes: SchemeTag::ALL.iter().map(|&t| Scheme::defaults(t)).collect(),
            max_rounds: 20,
            caliper_scale: CaliperScale::Probability,
            replacement: Replacement::Without,
            refit: Refit::FirstRound,
            caliper_rounds: CaliperRounds::FirstRound,
        }
    }
}

impl MatchingSettings {
    pub fn scheme(&self, tag: SchemeTag) -> Scheme {
        self.schemes.iter().find(|s| s.tag == tag).copied().unwrap_or_else(|| Scheme::defaults(tag))
    }

    pub fn protocol(&self, tag: SchemeTag, seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            scheme: self.scheme(tag),
            max_rounds: self.max_rounds,
            seed,
            caliper_scale: self.caliper_scale,
            replacement: self.replacement,
            refit: self.refit,
            caliper_rounds: self.caliper_rounds,
            fit: FitOptions::default(),
        }
    }
}

/// Result of applying one scheme to one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeOutcome {
    pub estimate: Estimate,
    pub matched_size: usize,
    pub groups: Quad,
}

/// Matches (unless naive) and estimates.
pub fn apply_scheme(quad: &Quad, config: &ProtocolConfig) -> Result<SchemeOutcome> {
    match config.scheme.tag {
        SchemeTag::Naive => {
            let estimate = naive_did(quad)?;
            Ok(SchemeOutcome { estimate, matched_size: quad.len(), groups: quad.clone() })
        }
        SchemeTag::OneD => {
            let m = run_1d(quad, config)?;
            let estimate = regression_did_quad(&m.groups)?;
            Ok(SchemeOutcome { estimate, matched_size: m.matched_size(), groups: m.groups })
        }
        _ => {
            let m = run_2dpsm(quad, config)?;
            let estimate = diff_in_means_did(&m.groups)?;
            Ok(SchemeOutcome { estimate, matched_size: m.matched_size(), groups: m.groups })
        }
    }
}

/// One (scheme, scenario) row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRecord {
    pub scheme: SchemeTag,
    pub scenario: ScenarioId,
    pub matched_size: f64,
    pub mean_estimate: f64,
    pub sd: f64,
    pub bias_ratio: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub completed: bool,
    #[serde(skip)]
    pub replications: usize,
    /// Replications that produced an estimate.
    #[serde(skip)]
    pub successes: usize,
    /// Replications that emptied a group during matching.
    #[serde(skip)]
    pub group_emptied: usize,
    #[serde(skip)]
    pub median_matched_size: f64,
}

impl PerformanceRecord {
    /// Aggregates per-replication results against the true effect. A cell
    /// is completed unless more than half of its replications failed.
    pub fn aggregate(
        scheme: SchemeTag,
        scenario: ScenarioId,
        truth: f64,
        outcomes: &[Result<(Estimate, usize)>],
    ) -> Self {
        let ok: Vec<&(Estimate, usize)> = outcomes.iter().filter_map(|r| r.as_ref().ok()).collect();
        let m = ok.len();
        let estimates: Vec<f64> = ok.iter().map(|(e, _)| e.satt).collect();
        let sizes: Vec<f64> = ok.iter().map(|(_, s)| *s as f64).collect();
        let mean_estimate = mean(&estimates);
        let sd = match m {
            0 => f64::NAN,
            1 => 0.0,
            _ => sample_sd(&estimates),
        };
        let rmse = if m == 0 {
            f64::NAN
        } else {
            (estimates.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / m as f64).sqrt()
        };
        let coverage = if m == 0 {
            f64::NAN
        } else {
            ok.iter().filter(|(e, _)| e.covers(truth)).count() as f64 / m as f64
        };
        let failures = outcomes.len() - m;
        let group_emptied = outcomes
            .iter()
            .filter(|r| matches!(r, Err(Error::GroupEmptied { .. })))
            .count();
        Self {
            scheme,
            scenario,
            matched_size: mean(&sizes),
            mean_estimate,
            sd,
            bias_ratio: (mean_estimate - truth) / truth,
            rmse,
            coverage,
            completed: m > 0 && 2 * failures <= outcomes.len(),
            replications: outcomes.len(),
            successes: m,
            group_emptied,
            median_matched_size: median(&sizes),
        }
    }
}

/// Everything one replication needs, precomputed per scenario.
pub struct ScenarioData<'a> {
    pub scenario: ScenarioId,
    pub params: &'a DgpParams,
    pub pools: ScenarioPools,
    pub master_seed: u64,
}

impl<'a> ScenarioData<'a> {
    pub fn prepare(scenario: ScenarioId, params: &'a DgpParams, master_seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(pool_seed(master_seed, scenario));
        let pools = ScenarioPools::generate(scenario, params, &mut rng)?;
        Ok(Self { scenario, params, pools, master_seed })
    }

    pub fn draw(&self, replication: usize) -> Result<Quad> {
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed(self.master_seed, self.scenario, replication));
        let per_rep = 2 * self.params.n_per_period as u64;
        draw_dataset(self.scenario, self.params, &self.pools, replication as u64 * per_rep, &mut rng)
    }
}

/// Runs every (scenario, scheme) cell and returns one record per cell,
/// ordered by scheme then scenario. Replications run in parallel on the
/// current rayon pool; results do not depend on scheduling.
pub fn run_study(
    scenarios: &[ScenarioId],
    schemes: &[SchemeTag],
    params: &DgpParams,
    settings: &MatchingSettings,
    master_seed: u64,
) -> Result<Vec<PerformanceRecord>> {
    params.validate()?;
    for s in &settings.schemes {
        s.validate()?;
    }
    let mut cells: Vec<PerformanceRecord> = Vec::new();
    for &scenario in scenarios {
        let data = ScenarioData::prepare(scenario, params, master_seed)?;
        let per_rep: Vec<Vec<Result<(Estimate, usize)>>> = (0..params.replications)
            .into_par_iter()
            .map(|rep| {
                let quad = match data.draw(rep) {
                    Ok(q) => q,
                    Err(e) => return schemes.iter().map(|_| Err(e.clone())).collect(),
                };
                schemes
                    .iter()
                    .map(|&tag| {
                        let config = settings.protocol(tag, match_seed(master_seed, scenario, tag, rep));
                        apply_scheme(&quad, &config).map(|o| (o.estimate, o.matched_size))
                    })
                    .collect()
            })
            .collect();
        for (i, &tag) in schemes.iter().enumerate() {
            let column: Vec<Result<(Estimate, usize)>> = per_rep.iter().map(|r| r[i].clone()).collect();
            cells.push(PerformanceRecord::aggregate(tag, scenario, params.treatment_effect, &column));
        }
    }
    cells.sort_by_key(|r| (r.scheme, r.scenario));
    Ok(cells)
}
