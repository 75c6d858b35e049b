//! Fixed-capacity population with rank-based parent selection.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Fingerprint, IndividualId, PolicyIndividual};

pub const DEFAULT_CAPACITY: usize = 16;
pub const DEFAULT_PARENTS: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    #[error("policy pool is empty")]
    EmptyPool,
    #[error("candidate {0} has not been evaluated")]
    UnevaluatedCandidate(IndividualId),
    #[error("invalid ranks: {0}")]
    InvalidRanks(String),
    #[error("pool capacity must be positive")]
    ZeroCapacity,
}

/// Selection probabilities `p_i ∝ 1 / (r_i + n)` for 1-based ranks.
///
/// `n` is the pool capacity, not its current occupancy.
pub fn selection_weights(ranks: &[usize], n: usize) -> Result<Vec<f64>, PoolError> {
    if ranks.is_empty() {
        return Err(PoolError::EmptyPool);
    }
    if n == 0 {
        return Err(PoolError::ZeroCapacity);
    }
    let mut seen = BTreeSet::new();
    for &r in ranks {
        if r == 0 || r > ranks.len() || !seen.insert(r) {
            return Err(PoolError::InvalidRanks(format!("{ranks:?}")));
        }
    }
    let raw: Vec<f64> = ranks.iter().map(|&r| 1.0 / (r + n) as f64).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPool {
    capacity: usize,
    /// Best first; equal scores keep admission order.
    members: Vec<PolicyIndividual>,
}

/// What one admission batch did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdmissionOutcome {
    /// Candidates present in the pool after truncation.
    pub admitted: Vec<IndividualId>,
    /// Candidates dropped as fingerprint duplicates, in candidate order.
    pub duplicates: Vec<IndividualId>,
    /// Failed candidates kept out because failed admission is disabled.
    pub rejected: Vec<IndividualId>,
    /// Candidates and incumbents cut by truncation.
    pub evicted: Vec<IndividualId>,
}

impl PolicyPool {
    pub fn new(capacity: usize) -> Result<Self, PoolError> {
        if capacity == 0 {
            return Err(PoolError::ZeroCapacity);
        }
        Ok(PolicyPool {
            capacity,
            members: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn members(&self) -> &[PolicyIndividual] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn best(&self) -> Option<&PolicyIndividual> {
        self.members.first()
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best().map(PolicyIndividual::score)
    }

    pub fn ids(&self) -> Vec<IndividualId> {
        self.members.iter().map(|m| m.id.clone()).collect()
    }

    pub fn contains_fingerprint(&self, fp: &Fingerprint) -> bool {
        self.members.iter().any(|m| &m.fingerprint == fp)
    }

    /// Selection probability of each member, in rank order.
    pub fn weights(&self) -> Result<Vec<f64>, PoolError> {
        let ranks: Vec<usize> = (1..=self.members.len()).collect();
        selection_weights(&ranks, self.capacity)
    }

    /// Draws `m` parents without replacement (renormalizing after each draw).
    /// When the pool holds fewer than `m` members the remaining slots are
    /// drawn with replacement. Result order is draw order.
    pub fn select_parents<R: Rng + ?Sized>(
        &self,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<&PolicyIndividual>, PoolError> {
        let weights = self.weights()?;
        let mut remaining: Vec<usize> = (0..self.members.len()).collect();
        let mut picked = Vec::with_capacity(m);
        while picked.len() < m && !remaining.is_empty() {
            let dist = WeightedIndex::new(remaining.iter().map(|&i| weights[i]))
                .expect("selection weights are positive");
            let slot = dist.sample(rng);
            picked.push(remaining.remove(slot));
        }
        if picked.len() < m {
            let dist = WeightedIndex::new(&weights).expect("selection weights are positive");
            while picked.len() < m {
                picked.push(dist.sample(rng));
            }
        }
        Ok(picked.into_iter().map(|i| &self.members[i]).collect())
    }

    /// Dedups `candidates` by fingerprint against the pool and each other
    /// (first occurrence wins), merges, sorts by score descending with
    /// incumbents ahead of equally scored newcomers, and truncates to
    /// capacity.
    pub fn admit(
        &mut self,
        candidates: Vec<PolicyIndividual>,
        admit_failed: bool,
    ) -> Result<AdmissionOutcome, PoolError> {
        if let Some(c) = candidates.iter().find(|c| !c.is_evaluated()) {
            return Err(PoolError::UnevaluatedCandidate(c.id.clone()));
        }
        let mut outcome = AdmissionOutcome::default();
        let mut seen: BTreeSet<Fingerprint> =
            self.members.iter().map(|m| m.fingerprint.clone()).collect();
        let mut fresh = Vec::new();
        for c in candidates {
            if !seen.insert(c.fingerprint.clone()) {
                outcome.duplicates.push(c.id);
            } else if c.failed() && !admit_failed {
                outcome.rejected.push(c.id);
            } else {
                fresh.push(c);
            }
        }
        let fresh_ids: BTreeSet<IndividualId> = fresh.iter().map(|c| c.id.clone()).collect();

        self.members.extend(fresh);
        // Stable sort keeps incumbents ahead on ties.
        self.members
            .sort_by(|a, b| b.score().total_cmp(&a.score()));
        if self.members.len() > self.capacity {
            outcome
                .evicted
                .extend(self.members.drain(self.capacity..).map(|m| m.id));
        }
        outcome.admitted = self
            .members
            .iter()
            .filter(|m| fresh_ids.contains(&m.id))
            .map(|m| m.id.clone())
            .collect();
        Ok(outcome)
    }
}

/// Functional form of [`PolicyPool::admit`].
pub fn admit_offspring(
    pool: &PolicyPool,
    candidates: Vec<PolicyIndividual>,
) -> Result<PolicyPool, PoolError> {
    let mut next = pool.clone();
    next.admit(candidates, true)?;
    Ok(next)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{LineageRecord, QuantitativeMetrics};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn scored(tag: u32, score: f64) -> PolicyIndividual {
        let code = format!("def choose_action(s, last_action, s_pre):\n    return {tag}\n");
        PolicyIndividual::new(
            IndividualId::new(0, tag),
            code,
            format!("policy {tag}"),
            LineageRecord::seed(),
            "choose_action",
        )
        .unwrap()
        .with_evaluation(
            QuantitativeMetrics {
                aggregate_score: score,
                per_instance: vec![],
                resets_used: 5,
                failure: None,
            },
            vec![],
        )
    }

    fn pool_of(scores: &[f64], capacity: usize) -> PolicyPool {
        let mut pool = PolicyPool::new(capacity).unwrap();
        let cands = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| scored(i as u32, s))
            .collect();
        pool.admit(cands, true).unwrap();
        pool
    }

    #[test]
    fn single_candidate_weight() {
        assert_eq!(selection_weights(&[1], 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn two_ranks_exact() {
        let w = selection_weights(&[1, 2], 2).unwrap();
        assert!((w[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((w[1] - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn four_ranks_match_rational_oracle() {
        use num_rational::Ratio;
        let raw: Vec<Ratio<i64>> = (1..=4).map(|r| Ratio::new(1, r + 4)).collect();
        let total: Ratio<i64> = raw.iter().copied().sum();
        let w = selection_weights(&[1, 2, 3, 4], 4).unwrap();
        for (got, exact) in w.iter().zip(&raw) {
            let e = *exact / total;
            let e = *e.numer() as f64 / *e.denom() as f64;
            assert!((got - e).abs() < 1e-15);
        }
        let rounded: Vec<f64> = w.iter().map(|x| (x * 1e4).round() / 1e4).collect();
        assert_eq!(rounded, vec![0.3152, 0.2627, 0.2251, 0.1970]);
    }

    #[test]
    fn weight_errors() {
        assert_eq!(selection_weights(&[], 4), Err(PoolError::EmptyPool));
        assert!(matches!(selection_weights(&[1, 1], 4), Err(PoolError::InvalidRanks(_))));
        assert!(matches!(selection_weights(&[0], 4), Err(PoolError::InvalidRanks(_))));
        assert!(matches!(selection_weights(&[1, 3], 4), Err(PoolError::InvalidRanks(_))));
    }

    #[test]
    fn pool_of_one_fills_with_replacement() {
        let pool = pool_of(&[0.5], 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parents = pool.select_parents(2, &mut rng).unwrap();
        assert_eq!(parents.len(), 2);
        assert_eq!(parents[0].id, parents[1].id);
    }

    #[test]
    fn pool_of_two_never_duplicates() {
        let pool = pool_of(&[0.5, 0.4], 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let parents = pool.select_parents(2, &mut rng).unwrap();
            assert_ne!(parents[0].id, parents[1].id);
        }
    }

    #[test]
    fn empty_pool_selection_fails() {
        let pool = PolicyPool::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pool.select_parents(2, &mut rng).unwrap_err(), PoolError::EmptyPool);
    }

    #[test]
    fn full_pool_evicts_worst() {
        let mut scores: Vec<f64> = (0..16).map(|i| 0.4 + i as f64 * 0.01).collect();
        scores[7] = 0.3;
        let mut pool = pool_of(&scores, 16);
        let worst = pool.members().last().unwrap().id.clone();
        assert_eq!(pool.members().last().unwrap().score(), 0.3);
        let out = pool.admit(vec![scored(100, 0.9)], true).unwrap();
        assert_eq!(out.admitted, vec![IndividualId::new(0, 100)]);
        assert_eq!(out.evicted, vec![worst]);
        assert_eq!(pool.best_score(), Some(0.9));
        assert_eq!(pool.len(), 16);
    }

    #[test]
    fn duplicate_fingerprint_leaves_pool_unchanged() {
        let mut pool = pool_of(&[0.5, 0.2], 16);
        let before = pool.clone();
        let mut dup = scored(0, 0.99);
        dup.id = IndividualId::new(3, 1);
        let out = pool.admit(vec![dup], true).unwrap();
        assert_eq!(out.duplicates, vec![IndividualId::new(3, 1)]);
        assert_eq!(pool, before);
    }

    #[test]
    fn top_sixteen_of_twenty() {
        let scores: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64 / 10.0).collect();
        let pool = pool_of(&scores, 16);
        let mut oracle = scores.clone();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());
        oracle.truncate(16);
        let got: Vec<f64> = pool.members().iter().map(|m| m.score()).collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn ties_favor_earlier_admission() {
        let mut pool = pool_of(&[0.5], 4);
        pool.admit(vec![scored(9, 0.5)], true).unwrap();
        assert_eq!(pool.ids(), vec![IndividualId::new(0, 0), IndividualId::new(0, 9)]);
    }

    #[test]
    fn unevaluated_rejected() {
        let mut pool = PolicyPool::new(4).unwrap();
        let mut c = scored(1, 0.1);
        c.metrics = None;
        assert_eq!(
            pool.admit(vec![c], true).unwrap_err(),
            PoolError::UnevaluatedCandidate(IndividualId::new(0, 1))
        );
    }

    #[test]
    fn failed_candidates_can_be_excluded() {
        let mut pool = PolicyPool::new(4).unwrap();
        let mut c = scored(1, -1.0);
        c.metrics.as_mut().unwrap().failure = Some("boom".into());
        pool.admit(vec![c.clone()], false).unwrap();
        assert!(pool.is_empty());
        pool.admit(vec![c], true).unwrap();
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn first_draw_tracks_weights() {
        let pool = pool_of(&(0..16).map(|i| 1.0 - i as f64 * 0.01).collect::<Vec<_>>(), 16);
        let weights = pool.weights().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 100_000;
        let mut top = 0usize;
        for _ in 0..draws {
            if pool.select_parents(2, &mut rng).unwrap()[0].id == pool.members()[0].id {
                top += 1;
            }
        }
        let freq = top as f64 / draws as f64;
        assert!((freq - weights[0]).abs() < 0.005, "{freq} vs {}", weights[0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_sum_to_one(len in 1usize..=64, n in 1usize..=64) {
                let ranks: Vec<usize> = (1..=len).collect();
                let w = selection_weights(&ranks, n).unwrap();
                let total: f64 = w.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(w.windows(2).all(|p| p[0] > p[1]));
            }

            #[test]
            fn weights_permutation_equivariant(len in 1usize..=32, n in 1usize..=32, seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                let ranks: Vec<usize> = (1..=len).collect();
                let mut shuffled = ranks.clone();
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let base = selection_weights(&ranks, n).unwrap();
                let perm = selection_weights(&shuffled, n).unwrap();
                for (i, r) in shuffled.iter().enumerate() {
                    prop_assert!((perm[i] - base[r - 1]).abs() < 1e-15);
                }
            }
        }
    }
}
