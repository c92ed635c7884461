//! Weighted majority voting over candidate pools.
//!
//! Candidates are grouped by their complete list of test outputs; each group
//! is weighted by its size plus `c` times its mean train accuracy, so with a
//! large `c` accuracy dominates and size breaks ties.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arc::{CandidateEvaluation, Grid, ProgramId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VoteError {
    #[error("no candidate produced a complete set of test outputs")]
    EmptyPool,
    #[error("ground-truth test outputs are not available")]
    MissingTruth,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// `count + c * mean train accuracy`
    #[default]
    CountPlusAccuracy,
    /// Sum of member train accuracies.
    SumOfAccuracies,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoteConfig {
    pub c: f64,
    pub n_output: usize,
    pub mode: VoteMode,
}

impl Default for VoteConfig {
    fn default() -> Self {
        VoteConfig {
            c: 1000.0,
            n_output: 2,
            mode: VoteMode::CountPlusAccuracy,
        }
    }
}

impl VoteConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.c.is_nan() || self.c < 0.0 {
            return Err("vote.c must be >= 0".into());
        }
        if self.n_output == 0 {
            return Err("vote.n_output must be >= 1".into());
        }
        Ok(())
    }

    pub fn weight(&self, count: usize, accuracy_sum: f64) -> f64 {
        match self.mode {
            VoteMode::CountPlusAccuracy => count as f64 + self.c * (accuracy_sum / count as f64),
            VoteMode::SumOfAccuracies => accuracy_sum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VotePattern {
    pub pattern_key: String,
    pub outputs: Vec<Grid>,
    /// Ascending.
    pub members: Vec<ProgramId>,
    pub count: usize,
    pub group_train_accuracy: f64,
    pub weight: f64,
}

impl VotePattern {
    pub fn matches(&self, truth: &[Grid]) -> bool {
        self.outputs.as_slice() == truth
    }
}

/// Canonical key for a list of test outputs: nested integer lists, in
/// test-input order.
pub fn pattern_key(grids: &[&Grid]) -> String {
    let raw: Vec<_> = grids.iter().map(|g| g.to_raw()).collect();
    serde_json::to_string(&raw).expect("grids serialize")
}

/// Shared test outputs and (member, train accuracy) pairs.
type Group = (Vec<Grid>, Vec<(ProgramId, f64)>);

/// Groups candidates with complete, error-free test outputs and ranks the
/// groups by weight, then count, then key.
pub fn weighted_majority_vote(
    candidates: &[CandidateEvaluation],
    config: &VoteConfig,
) -> Result<Vec<VotePattern>, VoteError> {
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    for c in candidates {
        let Some(grids) = c.test_grids() else { continue };
        groups
            .entry(pattern_key(&grids))
            .or_insert_with(|| (grids.into_iter().cloned().collect(), Vec::new()))
            .1
            .push((c.program_id, c.train_accuracy));
    }
    if groups.is_empty() {
        return Err(VoteError::EmptyPool);
    }
    let mut ranked: Vec<VotePattern> = groups
        .into_iter()
        .map(|(key, (outputs, mut members))| {
            // Summing in a canonical order keeps weights bit-identical under
            // any permutation of the input pool.
            members.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let mut accs: Vec<f64> = members.iter().map(|m| m.1).collect();
            accs.sort_by(f64::total_cmp);
            let sum: f64 = accs.iter().sum();
            let count = members.len();
            VotePattern {
                pattern_key: key,
                outputs,
                members: members.into_iter().map(|m| m.0).collect(),
                count,
                group_train_accuracy: sum / count as f64,
                weight: config.weight(count, sum),
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then(b.count.cmp(&a.count))
            .then(a.pattern_key.cmp(&b.pattern_key))
    });
    Ok(ranked)
}

/// Solved iff one of the top `n_output` patterns reproduces every test
/// output.
pub fn score_task(ranked: &[VotePattern], truth: Option<&[Grid]>, n_output: usize) -> Result<bool, VoteError> {
    let truth = truth.ok_or(VoteError::MissingTruth)?;
    Ok(ranked.iter().take(n_output).any(|p| p.matches(truth)))
}

/// Solved iff any candidate at all is correct on every test input.
pub fn oracle_score(candidates: &[CandidateEvaluation], truth: Option<&[Grid]>) -> Result<bool, VoteError> {
    let truth = truth.ok_or(VoteError::MissingTruth)?;
    Ok(candidates.iter().any(|c| c.solves(truth)))
}

/// Votes over the concatenation of several models' pools.
pub fn pool_vote(pools: &[Vec<CandidateEvaluation>], config: &VoteConfig) -> Result<Vec<VotePattern>, VoteError> {
    let all: Vec<CandidateEvaluation> = pools.iter().flatten().cloned().collect();
    weighted_majority_vote(&all, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arc::Outcome;

    fn cand(id: u64, acc: f64, out: &[u8]) -> CandidateEvaluation {
        CandidateEvaluation {
            program_id: ProgramId(id),
            train_outcomes: vec![],
            test_outcomes: vec![Outcome::Ok {
                grid: Grid::new(vec![out.to_vec()]).unwrap(),
            }],
            train_accuracy: acc,
        }
    }

    #[test]
    fn single_perfect_candidate() {
        let r = weighted_majority_vote(&[cand(0, 1.0, &[1])], &VoteConfig::default()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].weight, 1001.0);
    }

    #[test]
    fn accuracy_beats_count() {
        let pool = [
            cand(0, 0.0, &[1]),
            cand(1, 0.0, &[1]),
            cand(2, 0.0, &[1]),
            cand(3, 1.0, &[2]),
        ];
        let r = weighted_majority_vote(&pool, &VoteConfig::default()).unwrap();
        assert_eq!(r[0].members, vec![ProgramId(3)]);
        assert_eq!(r[1].weight, 3.0);
    }

    #[test]
    fn sum_mode_counts_accuracy_mass() {
        let pool = [cand(0, 0.5, &[1]), cand(1, 0.5, &[1]), cand(2, 0.9, &[2])];
        let cfg = VoteConfig {
            mode: VoteMode::SumOfAccuracies,
            ..VoteConfig::default()
        };
        let r = weighted_majority_vote(&pool, &cfg).unwrap();
        assert_eq!(r[0].count, 2);
        assert_eq!(r[0].weight, 1.0);
    }

    #[test]
    fn errored_candidates_do_not_vote() {
        let mut bad = cand(0, 1.0, &[1]);
        bad.test_outcomes = vec![Outcome::Timeout];
        assert_eq!(
            weighted_majority_vote(&[bad], &VoteConfig::default()),
            Err(VoteError::EmptyPool)
        );
    }

    #[test]
    fn scoring_respects_n_output() {
        let pool = [cand(0, 1.0, &[1]), cand(1, 0.9, &[2]), cand(2, 0.8, &[3])];
        let r = weighted_majority_vote(&pool, &VoteConfig::default()).unwrap();
        let truth = |v: u8| vec![Grid::new(vec![vec![v]]).unwrap()];
        assert!(score_task(&r, Some(&truth(1)), 2).unwrap());
        assert!(!score_task(&r, Some(&truth(3)), 2).unwrap());
        assert!(!score_task(&r, Some(&truth(9)), 2).unwrap());
        assert!(oracle_score(&pool, Some(&truth(3))).unwrap());
        assert!(!oracle_score(&pool, Some(&truth(9))).unwrap());
        assert_eq!(score_task(&r, None, 2), Err(VoteError::MissingTruth));
    }

    #[test]
    fn doubled_pool_doubles_counts() {
        let pool = vec![cand(0, 0.5, &[1]), cand(1, 0.0, &[2])];
        let once = weighted_majority_vote(&pool, &VoteConfig::default()).unwrap();
        let twice = pool_vote(&[pool.clone(), pool], &VoteConfig::default()).unwrap();
        assert_eq!(once.len(), twice.len());
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(a.pattern_key, b.pattern_key);
            assert_eq!(2 * a.count, b.count);
            assert_eq!(a.group_train_accuracy, b.group_train_accuracy);
        }
    }

    #[test]
    fn pattern_key_is_canonical() {
        let a = Grid::new(vec![vec![1, 2]]).unwrap();
        let b = Grid::new(vec![vec![3], vec![4]]).unwrap();
        assert_eq!(pattern_key(&[&a, &b]), "[[[1,2]],[[3],[4]]]");
    }
}
