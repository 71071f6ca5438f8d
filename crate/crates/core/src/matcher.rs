//! Greedy one-to-one nearest-neighbour matching.
//!
//! Reference units are visited in a random order drawn from the supplied
//! generator (after sorting by id, so the caller's list order never matters).
//! Each visited unit takes the closest remaining pool unit; ties go to the
//! lower pool id. When the closest candidate lies outside the caliper the
//! reference unit stays unmatched and the pool is left untouched.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Replacement {
    /// A matched pool unit leaves the pool.
    #[default]
    Without,
    /// Pool units may be matched repeatedly.
    With,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub reference_id: u64,
    pub pool_id: u64,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// In visit order.
    pub pairs: Vec<Match>,
    pub unmatched_reference_ids: Vec<u64>,
    /// Distinct pool ids used, in first-use order.
    pub consumed_pool_ids: Vec<u64>,
}

pub fn greedy_nn_match<T, F, R>(
    reference: &[(u64, T)],
    pool: &[(u64, T)],
    metric: F,
    caliper: Option<f64>,
    replacement: Replacement,
    rng: &mut R,
) -> MatchResult
where
    F: Fn(&T, &T) -> f64,
    R: Rng + ?Sized,
{
    let mut order: Vec<usize> = (0..reference.len()).collect();
    order.sort_by_key(|&i| reference[i].0);
    order.shuffle(rng);

    let mut pool_order: Vec<usize> = (0..pool.len()).collect();
    pool_order.sort_by_key(|&i| pool[i].0);
    let mut available = vec![true; pool_order.len()];
    let mut used = vec![false; pool_order.len()];

    let mut result = MatchResult::default();
    for &ri in &order {
        let (ref_id, ref_value) = &reference[ri];
        let mut best: Option<(usize, f64)> = None;
        for (slot, &pi) in pool_order.iter().enumerate() {
            if !available[slot] {
                continue;
            }
            let d = metric(ref_value, &pool[pi].1);
            if d.is_nan() {
                continue;
            }
            // Strict comparison in ascending-id order keeps the lowest id on ties.
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((slot, d));
            }
        }
        match best {
            Some((slot, d)) if caliper.is_none_or(|c| d <= c) => {
                let pool_id = pool[pool_order[slot]].0;
                result.pairs.push(Match { reference_id: *ref_id, pool_id, distance: d });
                if !used[slot] {
                    used[slot] = true;
                    result.consumed_pool_ids.push(pool_id);
                }
                if replacement == Replacement::Without {
                    available[slot] = false;
                }
            }
            _ => result.unmatched_reference_ids.push(*ref_id),
        }
    }
    result
}
