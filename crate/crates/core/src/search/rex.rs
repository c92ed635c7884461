//! REx refinement: each program is a bandit arm with a Beta posterior
//! shaped by its train accuracy and penalised by how often it was refined.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{run_completions, Attempt, Phase, SearchContext, SearchError};
use crate::arc::{CandidateEvaluation, Program, ProgramId, Task};
use crate::gateway::{build_refinement_prompt, GatewayError};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RexArm {
    pub program_id: ProgramId,
    pub heuristic_value: f64,
    pub pull_count: u64,
}

impl RexArm {
    pub fn new(program_id: ProgramId, heuristic_value: f64) -> Self {
        RexArm {
            program_id,
            heuristic_value: heuristic_value.clamp(0.0, 1.0),
            pull_count: 0,
        }
    }

    pub fn alpha(&self, c: f64) -> f64 {
        1.0 + c * self.heuristic_value
    }

    pub fn beta(&self, c: f64) -> f64 {
        1.0 + c * (1.0 - self.heuristic_value) + self.pull_count as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RexConfig {
    pub c: f64,
    pub n_completions_per_pull: usize,
    pub islands: usize,
    /// Refinement attempts (completions) for the whole task.
    pub refinement_budget: usize,
    pub seed: u64,
}

impl Default for RexConfig {
    fn default() -> Self {
        RexConfig {
            c: 20.0,
            n_completions_per_pull: 4,
            islands: 4,
            refinement_budget: 3000,
            seed: 0,
        }
    }
}

impl RexConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.c.is_nan() || self.c <= 0.0 {
            return Err("rex.c must be positive".into());
        }
        if self.islands == 0 {
            return Err("rex.islands must be >= 1".into());
        }
        if self.n_completions_per_pull == 0 {
            return Err("rex.n_completions_per_pull must be >= 1".into());
        }
        Ok(())
    }

    /// Attempt share per island: equal split, remainder to island 0.
    pub fn island_shares(&self) -> Vec<usize> {
        let base = self.refinement_budget / self.islands;
        let mut shares = vec![base; self.islands];
        shares[0] += self.refinement_budget % self.islands;
        shares
    }

    /// Pulls an island makes for a given attempt share; the last pull may
    /// request fewer completions.
    pub fn pulls_for(&self, share: usize) -> usize {
        share.div_ceil(self.n_completions_per_pull)
    }
}

/// Thompson draw over the arms; returns the index of the winner.
/// Ties go to the lowest program id.
pub fn rex_select(arms: &[RexArm], c: f64, rng: &mut ChaCha8Rng) -> usize {
    assert!(!arms.is_empty(), "rex_select needs at least one arm");
    let mut best = 0;
    let mut best_x = f64::NEG_INFINITY;
    for (i, arm) in arms.iter().enumerate() {
        let x = Beta::new(arm.alpha(c), arm.beta(c))
            .expect("shape parameters are >= 1")
            .sample(rng);
        if x > best_x || (x == best_x && arm.program_id < arms[best].program_id) {
            best = i;
            best_x = x;
        }
    }
    best
}

struct Island {
    index: usize,
    arms: Vec<RexArm>,
    rng: ChaCha8Rng,
    remaining: usize,
    pulls: u64,
}

/// Output of the refinement phase.
#[derive(Debug, Default)]
pub struct RefineOutcome {
    pub attempts: Vec<Attempt>,
    pub early_stopped: bool,
    pub interrupted: Option<GatewayError>,
    pub pulls_per_island: Vec<u64>,
    /// Arm state per island when the phase ended.
    pub final_arms: Vec<Vec<RexArm>>,
}

/// Runs the islands in synchronized rounds: every island with budget left
/// makes one pull per round (in parallel), then results are merged in
/// island order and the task-wide early-stop counter is checked. Overshoot
/// past the threshold is therefore at most one pull per island.
pub fn rex_refine(
    task: &Task,
    initial: &[(&Program, &CandidateEvaluation)],
    config: &RexConfig,
    early_stop_perfect: usize,
    ctx: &SearchContext<'_>,
    next_id: &mut u64,
) -> Result<RefineOutcome, SearchError> {
    config.validate().map_err(SearchError::Config)?;
    let seeds: Vec<_> = initial.iter().filter(|(_, e)| !e.has_train_error()).collect();
    if seeds.is_empty() {
        return Err(SearchError::NoViableSeeds);
    }
    let mut known: HashMap<ProgramId, (Program, CandidateEvaluation)> = seeds
        .iter()
        .map(|(p, e)| (p.id, ((*p).clone(), (*e).clone())))
        .collect();
    let seed_arms: Vec<RexArm> = seeds.iter().map(|(p, e)| RexArm::new(p.id, e.train_accuracy)).collect();
    let mut islands: Vec<Island> = config
        .island_shares()
        .into_iter()
        .enumerate()
        .map(|(i, share)| Island {
            index: i,
            arms: seed_arms.clone(),
            rng: seed::rng(config.seed, &[i as u64]),
            remaining: share,
            pulls: 0,
        })
        .collect();

    let mut out = RefineOutcome::default();
    let mut perfect = 0usize;
    loop {
        // Plan the round sequentially so ids and draws are schedule-free.
        let mut plans = Vec::new();
        for isl in islands.iter_mut().filter(|i| i.remaining > 0) {
            let arm = rex_select(&isl.arms, config.c, &mut isl.rng);
            let n = config.n_completions_per_pull.min(isl.remaining);
            let first_id = *next_id;
            *next_id += n as u64;
            plans.push((isl.index, arm, n, first_id, isl.pulls));
        }
        if plans.is_empty() {
            break;
        }

        let results: Vec<Result<Vec<Attempt>, GatewayError>> = std::thread::scope(|s| {
            let handles: Vec<_> = plans
                .iter()
                .map(|&(island, arm, n, first_id, pull)| {
                    let parent_id = islands[island].arms[arm].program_id;
                    let (parent, eval) = &known[&parent_id];
                    s.spawn(move || {
                        let messages = build_refinement_prompt(task, parent, eval);
                        let chat_seed = seed::derive_seed(ctx.seed, &[super::REFINE_STREAM, island as u64, pull]);
                        run_completions(
                            task,
                            &messages,
                            n,
                            chat_seed,
                            first_id,
                            Phase::Refine,
                            Some(island as u32),
                            Some(parent_id),
                            ctx,
                        )
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("island thread panicked"))
                .collect()
        });

        for (&(island, arm, n, _, _), result) in plans.iter().zip(results) {
            let isl = &mut islands[island];
            match result {
                Ok(attempts) => {
                    isl.arms[arm].pull_count += config.n_completions_per_pull as u64;
                    isl.remaining -= n;
                    isl.pulls += 1;
                    for a in attempts {
                        if let (Some(p), Some(e)) = (&a.program, &a.evaluation) {
                            if e.is_train_perfect() {
                                perfect += 1;
                            }
                            if !e.has_train_error() {
                                isl.arms.push(RexArm::new(p.id, e.train_accuracy));
                                known.insert(p.id, (p.clone(), e.clone()));
                            }
                        }
                        out.attempts.push(a);
                    }
                }
                Err(e) => {
                    if out.interrupted.is_none() {
                        out.interrupted = Some(e);
                    }
                }
            }
        }
        if out.interrupted.is_some() {
            break;
        }
        if perfect >= early_stop_perfect {
            out.early_stopped = true;
            break;
        }
    }
    out.pulls_per_island = islands.iter().map(|i| i.pulls).collect();
    out.final_arms = islands.into_iter().map(|i| i.arms).collect();
    Ok(out)
}

/// Empirical selection frequencies, mostly for diagnostics and tests.
pub fn selection_frequencies(arms: &[RexArm], c: f64, draws: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut counts = vec![0usize; arms.len()];
    for _ in 0..draws {
        counts[rex_select(arms, c, rng)] += 1;
    }
    counts.iter().map(|&k| k as f64 / draws as f64).collect()
}
