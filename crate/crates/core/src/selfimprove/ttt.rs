//! Weighted sampling from vote categories, for test-time training data
//! where no ground truth exists to rank candidates.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::arc::{CandidateEvaluation, ProgramId};
use crate::ensemble::{weighted_majority_vote, VoteConfig, VoteError};

/// Multinomial draw of `n` items over `weights` (need not be normalized).
/// All-zero weights are treated as uniform.
pub fn ttt_allocate(weights: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(!weights.is_empty(), "no categories");
    let uniform = vec![1.0; weights.len()];
    let w = if weights.iter().sum::<f64>() > 0.0 {
        weights
    } else {
        &uniform
    };
    let mut mass: f64 = w.iter().sum();
    let mut left = n as u64;
    let mut out = Vec::with_capacity(w.len());
    for (i, &wi) in w.iter().enumerate() {
        if i + 1 == w.len() || left == 0 {
            out.push(if i + 1 == w.len() { left as usize } else { 0 });
            continue;
        }
        let p = if mass > 0.0 { (wi / mass).clamp(0.0, 1.0) } else { 0.0 };
        let x = Binomial::new(left, p).expect("valid binomial").sample(rng);
        out.push(x as usize);
        left -= x;
        mass -= wi;
    }
    out
}

/// Draws `n` candidates: group shares from a multinomial over normalized
/// vote weights, then members within each group with replacement,
/// weighted by `c * train accuracy` (uniform when all are zero).
pub fn ttt_select(
    candidates: &[CandidateEvaluation],
    n: usize,
    vote: &VoteConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ProgramId>, VoteError> {
    let groups = weighted_majority_vote(candidates, vote)?;
    let acc: HashMap<ProgramId, f64> = candidates.iter().map(|c| (c.program_id, c.train_accuracy)).collect();
    let weights: Vec<f64> = groups.iter().map(|g| g.weight).collect();
    let alloc = ttt_allocate(&weights, n, rng);
    let mut out = Vec::with_capacity(n);
    for (g, &k) in groups.iter().zip(&alloc) {
        if k == 0 {
            continue;
        }
        let scores: Vec<f64> = g.members.iter().map(|m| vote.c * acc[m]).collect();
        if scores.iter().sum::<f64>() > 0.0 {
            let dist = WeightedIndex::new(&scores).expect("non-negative scores");
            out.extend((0..k).map(|_| g.members[dist.sample(rng)]));
        } else {
            out.extend((0..k).map(|_| g.members[rng.random_range(0..g.members.len())]));
        }
    }
    Ok(out)
}
