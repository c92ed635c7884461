//! Per-task data selection strategies, registered by name.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{filter_hybrid, relabel, ParentBin, RefinementExample, RelabeledExample, SelfImproveError};
use crate::arc::{CandidateEvaluation, Grid, Program, ProgramId, Task};
use crate::ensemble::VoteConfig;
use crate::registry::Registry;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    pub strategy: String,
    pub k_per_task: usize,
    pub seed: u64,
}

impl SelectionPolicy {
    pub fn sampling_default() -> Self {
        SelectionPolicy {
            strategy: "greedy-diverse".into(),
            k_per_task: 50,
            seed: 0,
        }
    }

    pub fn refinement_default() -> Self {
        SelectionPolicy {
            strategy: "diverse".into(),
            ..SelectionPolicy::sampling_default()
        }
    }
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy::sampling_default()
    }
}

/// A candidate as seen by a sampling selector.
#[derive(Clone, Copy, Debug)]
pub struct Scored<'a> {
    pub program: &'a Program,
    pub eval: &'a CandidateEvaluation,
    /// Fraction of test outputs matching ground truth; `None` without truth.
    pub test_accuracy: Option<f64>,
}

pub trait SamplingSelector: Send + Sync {
    fn name(&self) -> &str;

    fn requires_truth(&self) -> bool {
        false
    }

    /// Indices into `pool`, at most `k` of them (repeats allowed only for
    /// strategies that sample with replacement).
    fn select(&self, pool: &[Scored<'_>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, SelfImproveError>;
}

pub trait RefinementSelector: Send + Sync {
    fn name(&self) -> &str;
    fn select(&self, bins: &[ParentBin], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize>;
}

fn uniform_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx = index::sample(rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Best first: train accuracy, then test accuracy, then shorter source.
/// Equal keys end up in random order.
fn greedy_order(pool: &[Scored<'_>], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    order.sort_by(|&a, &b| {
        let (x, y) = (&pool[a], &pool[b]);
        y.eval
            .train_accuracy
            .total_cmp(&x.eval.train_accuracy)
            .then(
                y.test_accuracy
                    .unwrap_or(0.0)
                    .total_cmp(&x.test_accuracy.unwrap_or(0.0)),
            )
            .then(x.program.source.len().cmp(&y.program.source.len()))
    });
    order
}

/// Up to `k` lowest-train-accuracy candidates not in `taken` and not
/// sharing source text with them.
fn bottom(pool: &[Scored<'_>], taken: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let taken_idx: HashSet<usize> = taken.iter().copied().collect();
    let taken_src: HashSet<&str> = taken.iter().map(|&i| pool[i].program.source.as_str()).collect();
    let mut rest: Vec<usize> = (0..pool.len())
        .filter(|i| !taken_idx.contains(i) && !taken_src.contains(pool[*i].program.source.as_str()))
        .collect();
    rest.shuffle(rng);
    rest.sort_by(|&a, &b| pool[a].eval.train_accuracy.total_cmp(&pool[b].eval.train_accuracy));
    rest.truncate(k);
    rest
}

struct CorrectOnly;

impl SamplingSelector for CorrectOnly {
    fn name(&self) -> &str {
        "correct-only"
    }
    fn requires_truth(&self) -> bool {
        true
    }
    fn select(&self, pool: &[Scored<'_>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, SelfImproveError> {
        let correct: Vec<usize> = (0..pool.len())
            .filter(|&i| pool[i].eval.is_train_perfect() && pool[i].test_accuracy == Some(1.0))
            .collect();
        Ok(uniform_indices(correct.len(), k, rng)
            .into_iter()
            .map(|j| correct[j])
            .collect())
    }
}

struct Uniform;

impl SamplingSelector for Uniform {
    fn name(&self) -> &str {
        "uniform"
    }
    fn select(&self, pool: &[Scored<'_>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, SelfImproveError> {
        Ok(uniform_indices(pool.len(), k, rng))
    }
}

struct Greedy;

impl SamplingSelector for Greedy {
    fn name(&self) -> &str {
        "greedy"
    }
    fn select(&self, pool: &[Scored<'_>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, SelfImproveError> {
        let mut order = greedy_order(pool, rng);
        order.truncate(k);
        Ok(order)
    }
}

struct GreedyDiverse;

impl SamplingSelector for GreedyDiverse {
    fn name(&self) -> &str {
        "greedy-diverse"
    }
    fn select(&self, pool: &[Scored<'_>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, SelfImproveError> {
        if pool.len() <= k {
            return Ok((0..pool.len()).collect());
        }
        let mut top = greedy_order(pool, rng);
        top.truncate(k.div_ceil(2));
        let low = bottom(pool, &top, k / 2, rng);
        top.extend(low);
        Ok(top)
    }
}

/// Test-time variant of greedy-diverse: the top half is drawn by weighted
/// category sampling over vote groups instead of by ground-truth ranking.
struct TttDiverse {
    vote: VoteConfig,
}

impl SamplingSelector for TttDiverse {
    fn name(&self) -> &str {
        "ttt-diverse"
    }
    fn select(&self, pool: &[Scored<'_>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, SelfImproveError> {
        if pool.len() <= k {
            return Ok((0..pool.len()).collect());
        }
        let evals: Vec<CandidateEvaluation> = pool.iter().map(|s| s.eval.clone()).collect();
        let picked = super::ttt_select(&evals, k.div_ceil(2), &self.vote, rng)?;
        let pos: std::collections::HashMap<ProgramId, usize> =
            pool.iter().enumerate().map(|(i, s)| (s.program.id, i)).collect();
        let mut top: Vec<usize> = picked.iter().map(|id| pos[id]).collect();
        let low = bottom(pool, &top, k / 2, rng);
        top.extend(low);
        Ok(top)
    }
}

/// The built-in sampling strategies. `vote` parameterizes `ttt-diverse`.
pub fn sampling_selectors(vote: &VoteConfig) -> Registry<dyn SamplingSelector> {
    let mut r: Registry<dyn SamplingSelector> = Registry::new("sampling strategy");
    r.register("correct-only", Arc::new(CorrectOnly))
        .register("uniform", Arc::new(Uniform))
        .register("greedy", Arc::new(Greedy))
        .register("greedy-diverse", Arc::new(GreedyDiverse))
        .register("ttt-diverse", Arc::new(TttDiverse { vote: vote.clone() }));
    r
}

struct UniformRefinement;

impl RefinementSelector for UniformRefinement {
    fn name(&self) -> &str {
        "uniform"
    }
    fn select(&self, bins: &[ParentBin], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        uniform_indices(bins.len(), k, rng)
    }
}

/// Balanced over parent bins: bins are visited round-robin, one example
/// each, so exhausted bins hand their share to the others.
struct DiverseRefinement;

impl RefinementSelector for DiverseRefinement {
    fn name(&self) -> &str {
        "diverse"
    }
    fn select(&self, bins: &[ParentBin], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut per_bin: Vec<Vec<usize>> = ParentBin::ALL
            .iter()
            .map(|b| {
                let mut v: Vec<usize> = (0..bins.len()).filter(|&i| bins[i] == *b).collect();
                v.shuffle(rng);
                v.reverse();
                v
            })
            .collect();
        let mut out = Vec::new();
        while out.len() < k && per_bin.iter().any(|v| !v.is_empty()) {
            for v in per_bin.iter_mut() {
                if out.len() == k {
                    break;
                }
                if let Some(i) = v.pop() {
                    out.push(i);
                }
            }
        }
        out
    }
}

pub fn refinement_selectors() -> Registry<dyn RefinementSelector> {
    let mut r: Registry<dyn RefinementSelector> = Registry::new("refinement strategy");
    r.register("uniform", Arc::new(UniformRefinement))
        .register("diverse", Arc::new(DiverseRefinement));
    r
}

fn task_rng(policy: &SelectionPolicy, task_id: &str) -> ChaCha8Rng {
    seed::rng(policy.seed, &[seed::str_key(task_id)])
}

/// Picks and relabels up to `k_per_task` examples for one task. Only
/// candidates that relabel cleanly and do not hardcode their outputs are
/// eligible. `truth` must be `None` in test-time runs.
pub fn select_sampling_data(
    task: &Task,
    candidates: &[(&Program, &CandidateEvaluation)],
    truth: Option<&[Grid]>,
    policy: &SelectionPolicy,
    registry: &Registry<dyn SamplingSelector>,
) -> Result<Vec<RelabeledExample>, SelfImproveError> {
    let selector = registry.get(&policy.strategy)?;
    if selector.requires_truth() && truth.is_none() {
        return Err(SelfImproveError::TruthRequired(policy.strategy.clone()));
    }
    let mut eligible = Vec::new();
    for &(p, e) in candidates {
        if let Ok(ex) = relabel(p, task, e) {
            if filter_hybrid(p, e) {
                eligible.push((
                    Scored {
                        program: p,
                        eval: e,
                        test_accuracy: truth.map(|t| e.test_matches(t) as f64 / t.len() as f64),
                    },
                    ex,
                ));
            }
        }
    }
    if eligible.is_empty() {
        return Err(SelfImproveError::EmptySlice(task.task_id().to_string()));
    }
    let pool: Vec<Scored<'_>> = eligible.iter().map(|(s, _)| *s).collect();
    let picked = selector.select(&pool, policy.k_per_task, &mut task_rng(policy, task.task_id()))?;
    Ok(picked.into_iter().map(|i| eligible[i].1.clone()).collect())
}

/// Picks up to `k_per_task` successful refinements for one task.
pub fn select_refinement_data(
    task_id: &str,
    pool: &[RefinementExample],
    policy: &SelectionPolicy,
    registry: &Registry<dyn RefinementSelector>,
) -> Result<Vec<RefinementExample>, SelfImproveError> {
    let selector = registry.get(&policy.strategy)?;
    if pool.is_empty() {
        return Err(SelfImproveError::EmptySlice(task_id.to_string()));
    }
    let bins: Vec<ParentBin> = pool.iter().map(|r| r.parent_bin).collect();
    let picked = selector.select(&bins, policy.k_per_task, &mut task_rng(policy, task_id));
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}
