//! The iterative four-group matching procedure.
//!
//! One round runs four greedy matches in sequence:
//!
//! 1. BT (reference) against AT, on the longitudinal metric;
//! 2. the BT units matched in step 1 against BC, on the propensity score;
//! 3. the BC units matched in step 2 against AC, on the longitudinal metric;
//! 4. the AT units matched in step 1 against the AC units matched in step 3,
//!    on the propensity score.
//!
//! The survivors of a round are the BT units matched in step 2, the BC units
//! matched in step 3, and the AT/AC units paired in step 4. Rounds repeat on
//! the survivors until the four groups have equal size.
//!
//! By default each step's distance model is estimated once, in round 1, and
//! only round 1 applies calipers; see [`Refit`] and [`CaliperRounds`].

use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distance::{caliper_width, pooled_covariance, ps_distance, MahalanobisContext};
use crate::error::{Error, Result};
use crate::matcher::{greedy_nn_match, MatchResult, Replacement};
use crate::model::{
    GroupTag, LongitudinalMetric, MatchedPair, MatchedQuad, Observation, PairTag, Quad, Scheme,
    SchemeTag,
};
use crate::propensity::{fit_logistic, logit, FitOptions, PropensityModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaliperScale {
    /// Distances and caliper SD on fitted probabilities.
    #[default]
    Probability,
    /// Distances and caliper SD on fitted log-odds.
    Logit,
}

/// When each step's propensity model, caliper width and Mahalanobis
/// covariance are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refit {
    /// Once, on the groups entering round 1.
    #[default]
    FirstRound,
    /// Again on the survivors at the start of every round.
    EveryRound,
}

/// Rounds in which calipers prune.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaliperRounds {
    /// Round 1 only. Later rounds re-pair the survivors one-to-one, which
    /// trims each group to the smallest and ends the loop by round 2.
    #[default]
    FirstRound,
    /// Every round. Greedy matching of near-equal groups under a caliper
    /// nearly always drops a few units, so sizes rarely settle.
    EveryRound,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolConfig {
    pub scheme: Scheme,
    pub max_rounds: usize,
    pub seed: u64,
    pub caliper_scale: CaliperScale,
    pub replacement: Replacement,
    pub refit: Refit,
    pub caliper_rounds: CaliperRounds,
    pub fit: FitOptions,
}

impl ProtocolConfig {
    pub fn new(scheme: Scheme, seed: u64) -> Self {
        Self {
            scheme,
            max_rounds: 20,
            seed,
            caliper_scale: CaliperScale::default(),
            replacement: Replacement::default(),
            refit: Refit::default(),
            caliper_rounds: CaliperRounds::default(),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepMetric {
    Psm,
    Mdm,
}

/// Logistic fit on the union of two groups, labelled by membership in
/// `group_a`.
pub fn propensity_for_step(
    group_a: &[Observation],
    group_b: &[Observation],
    fit: &FitOptions,
) -> Result<PropensityModel> {
    let pool: Vec<(&[f64], bool)> = group_a
        .iter()
        .map(|o| (o.covariates.as_slice(), true))
        .chain(group_b.iter().map(|o| (o.covariates.as_slice(), false)))
        .collect();
    if pool.is_empty() {
        return Err(Error::OneClassPool);
    }
    fit_logistic(&pool, fit)
}

/// Distance model for one step: fitted on that step's two groups and kept
/// fixed for later rounds unless the config asks for refits.
enum StepModel {
    Psm { model: PropensityModel, width: Option<f64> },
    Mdm { ctx: MahalanobisContext, width: Option<f64> },
}

impl StepModel {
    fn fit(
        reference: &[Observation],
        pool: &[Observation],
        metric: StepMetric,
        caliper: Option<f64>,
        config: &ProtocolConfig,
    ) -> Result<Self> {
        match metric {
            StepMetric::Psm => {
                let model = propensity_for_step(reference, pool, &config.fit)?;
                let width = match caliper {
                    Some(mult) => {
                        let all = reference
                            .iter()
                            .chain(pool)
                            .map(|o| Ok(scale_score(model.predict(&o.covariates)?, config.caliper_scale)))
                            .collect::<Result<Vec<f64>>>()?;
                        // Identical scores: every distance is exactly zero, so a
                        // zero-width caliper still admits them all.
                        match caliper_width(&all, mult) {
                            Err(Error::DegenerateScores) => Some(0.0),
                            other => Some(other?),
                        }
                    }
                    None => None,
                };
                Ok(StepModel::Psm { model, width })
            }
            StepMetric::Mdm => {
                let a: Vec<&[f64]> = reference.iter().map(|o| o.covariates.as_slice()).collect();
                let b: Vec<&[f64]> = pool.iter().map(|o| o.covariates.as_slice()).collect();
                // A Mahalanobis caliper is an absolute distance.
                Ok(StepModel::Mdm { ctx: pooled_covariance(&a, &b)?, width: caliper })
            }
        }
    }

    fn run(
        &self,
        reference: &[Observation],
        pool: &[Observation],
        use_caliper: bool,
        config: &ProtocolConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<MatchResult> {
        match self {
            StepModel::Psm { model, width } => {
                let score = |o: &Observation| -> Result<(u64, f64)> {
                    Ok((o.id, scale_score(model.predict(&o.covariates)?, config.caliper_scale)))
                };
                let ref_scores = reference.iter().map(score).collect::<Result<Vec<_>>>()?;
                let pool_scores = pool.iter().map(score).collect::<Result<Vec<_>>>()?;
                Ok(greedy_nn_match(
                    &ref_scores,
                    &pool_scores,
                    |a, b| ps_distance(*a, *b),
                    width.filter(|_| use_caliper),
                    config.replacement,
                    rng,
                ))
            }
            StepModel::Mdm { ctx, width } => {
                let ref_units: Vec<(u64, &[f64])> =
                    reference.iter().map(|o| (o.id, o.covariates.as_slice())).collect();
                let pool_units: Vec<(u64, &[f64])> =
                    pool.iter().map(|o| (o.id, o.covariates.as_slice())).collect();
                Ok(greedy_nn_match(
                    &ref_units,
                    &pool_units,
                    |x, y| ctx.distance_unchecked(x, y),
                    width.filter(|_| use_caliper),
                    config.replacement,
                    rng,
                ))
            }
        }
    }
}

fn scale_score(p: f64, scale: CaliperScale) -> f64 {
    match scale {
        CaliperScale::Probability => p,
        CaliperScale::Logit => logit(p),
    }
}

/// One step of one round. `slot` carries the step's model across rounds.
#[allow(clippy::too_many_arguments)]
fn match_step(
    slot: &mut Option<StepModel>,
    round: usize,
    reference: &[Observation],
    pool: &[Observation],
    metric: StepMetric,
    caliper: Option<f64>,
    config: &ProtocolConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MatchResult> {
    if slot.is_none() || config.refit == Refit::EveryRound {
        *slot = Some(StepModel::fit(reference, pool, metric, caliper, config)?);
    }
    let use_caliper = round == 1 || config.caliper_rounds == CaliperRounds::EveryRound;
    slot.as_ref().expect("fitted above").run(reference, pool, use_caliper, config, rng)
}

fn retain_ids<'a>(group: &[Observation], ids: impl IntoIterator<Item = &'a u64>) -> Vec<Observation> {
    let keep: HashSet<u64> = ids.into_iter().copied().collect();
    group.iter().filter(|o| keep.contains(&o.id)).cloned().collect()
}

fn nonempty(group: &[Observation], tag: GroupTag, round: usize) -> Result<()> {
    if group.is_empty() {
        Err(Error::GroupEmptied { group: tag, round })
    } else {
        Ok(())
    }
}

fn record(pairs: &mut Vec<MatchedPair>, tag: PairTag, result: &MatchResult, round: usize) {
    pairs.extend(result.pairs.iter().map(|m| MatchedPair {
        tag,
        reference_id: m.reference_id,
        pool_id: m.pool_id,
        distance: m.distance,
        round,
    }));
}

fn check_inputs(quad: &Quad) -> Result<()> {
    for tag in GroupTag::ALL {
        if quad.group(tag).is_empty() {
            return Err(Error::EmptyGroup(tag));
        }
    }
    Ok(())
}

/// Runs the full two-dimensional procedure for schemes 2D-1, 2D-2 and 2D-3.
pub fn run_2dpsm(quad: &Quad, config: &ProtocolConfig) -> Result<MatchedQuad> {
    let scheme = &config.scheme;
    if !scheme.tag.is_two_dimensional() {
        return Err(Error::SchemeMismatch(scheme.tag.to_string()));
    }
    scheme.validate()?;
    if config.max_rounds == 0 {
        return Err(Error::Config("max_rounds must be at least 1".into()));
    }
    check_inputs(quad)?;
    let longitudinal = match scheme.longitudinal_metric {
        LongitudinalMetric::Mdm => StepMetric::Mdm,
        _ => StepMetric::Psm,
    };
    let cross = scheme.cross_sectional_caliper;
    let long = scheme.longitudinal_caliper;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = quad.clone();
    let mut pairs = Vec::new();
    let mut models: [Option<StepModel>; 4] = Default::default();

    for round in 1..=config.max_rounds {
        let [ma, mb, mc, md] = &mut models;
        let a = match_step(ma, round, &current.bt, &current.at, longitudinal, long, config, &mut rng)?;
        let bt_a = retain_ids(&current.bt, a.pairs.iter().map(|m| &m.reference_id));
        let at_a = retain_ids(&current.at, &a.consumed_pool_ids);
        nonempty(&bt_a, GroupTag::BT, round)?;
        nonempty(&at_a, GroupTag::AT, round)?;

        let b = match_step(mb, round, &bt_a, &current.bc, StepMetric::Psm, cross, config, &mut rng)?;
        let bt_b = retain_ids(&bt_a, b.pairs.iter().map(|m| &m.reference_id));
        let bc_b = retain_ids(&current.bc, &b.consumed_pool_ids);
        nonempty(&bt_b, GroupTag::BT, round)?;
        nonempty(&bc_b, GroupTag::BC, round)?;

        let c = match_step(mc, round, &bc_b, &current.ac, longitudinal, long, config, &mut rng)?;
        let bc_c = retain_ids(&bc_b, c.pairs.iter().map(|m| &m.reference_id));
        let ac_c = retain_ids(&current.ac, &c.consumed_pool_ids);
        nonempty(&bc_c, GroupTag::BC, round)?;
        nonempty(&ac_c, GroupTag::AC, round)?;

        let d = match_step(md, round, &at_a, &ac_c, StepMetric::Psm, cross, config, &mut rng)?;
        let at_d = retain_ids(&at_a, d.pairs.iter().map(|m| &m.reference_id));
        let ac_d = retain_ids(&ac_c, &d.consumed_pool_ids);
        nonempty(&at_d, GroupTag::AT, round)?;
        nonempty(&ac_d, GroupTag::AC, round)?;

        record(&mut pairs, PairTag::BtAt, &a, round);
        record(&mut pairs, PairTag::BtBc, &b, round);
        record(&mut pairs, PairTag::BcAc, &c, round);
        record(&mut pairs, PairTag::AtAc, &d, round);

        current = Quad { bt: bt_b, bc: bc_c, at: at_d, ac: ac_d };
        let sizes = current.sizes();
        if sizes.iter().all(|&s| s == sizes[0]) {
            return Ok(MatchedQuad { groups: current, pairs, rounds_used: round });
        }
    }
    Err(Error::MaxRoundsExceeded { rounds: config.max_rounds })
}

/// Cross-sectional-only matching: BT against BC and AT against AC, each by
/// propensity score, with no longitudinal pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedMatch {
    pub groups: Quad,
    pub pairs: Vec<MatchedPair>,
}

impl SlicedMatch {
    pub fn matched_size(&self) -> usize {
        self.groups.len()
    }
}

pub fn run_1d(quad: &Quad, config: &ProtocolConfig) -> Result<SlicedMatch> {
    let scheme = &config.scheme;
    if scheme.tag != SchemeTag::OneD {
        return Err(Error::SchemeMismatch(scheme.tag.to_string()));
    }
    scheme.validate()?;
    check_inputs(quad)?;
    let caliper = scheme.cross_sectional_caliper;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pairs = Vec::new();

    let before = match_step(&mut None, 1, &quad.bt, &quad.bc, StepMetric::Psm, caliper, config, &mut rng)?;
    let bt = retain_ids(&quad.bt, before.pairs.iter().map(|m| &m.reference_id));
    let bc = retain_ids(&quad.bc, &before.consumed_pool_ids);
    nonempty(&bt, GroupTag::BT, 1)?;
    nonempty(&bc, GroupTag::BC, 1)?;

    let after = match_step(&mut None, 1, &quad.at, &quad.ac, StepMetric::Psm, caliper, config, &mut rng)?;
    let at = retain_ids(&quad.at, after.pairs.iter().map(|m| &m.reference_id));
    let ac = retain_ids(&quad.ac, &after.consumed_pool_ids);
    nonempty(&at, GroupTag::AT, 1)?;
    nonempty(&ac, GroupTag::AC, 1)?;

    record(&mut pairs, PairTag::BtBc, &before, 1);
    record(&mut pairs, PairTag::AtAc, &after, 1);
    Ok(SlicedMatch { groups: Quad { bt, bc, at, ac }, pairs })
}

/// Pair label for each surviving observation: `(pair_id, round)`.
///
/// Labels come from the last round's cross-sectional pairs (BT:BC and
/// AT:AC) whose two members both survived. Before-period pairs are numbered
/// first, then after-period pairs, each in match order, starting at 1.
pub fn pair_labels(groups: &Quad, pairs: &[MatchedPair]) -> HashMap<u64, (u64, usize)> {
    let survivors: HashSet<u64> = groups.iter().map(|o| o.id).collect();
    let last_round = pairs.iter().map(|p| p.round).max().unwrap_or(0);
    let mut labels = HashMap::new();
    let mut next = 1u64;
    for tag in [PairTag::BtBc, PairTag::AtAc] {
        for p in pairs.iter().filter(|p| p.tag == tag && p.round == last_round) {
            if survivors.contains(&p.reference_id) && survivors.contains(&p.pool_id) {
                labels.insert(p.reference_id, (next, p.round));
                labels.insert(p.pool_id, (next, p.round));
                next += 1;
            }
        }
    }
    labels
}
