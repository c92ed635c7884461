//! Sample&Refine search for one task: bulk sampling with early stopping,
//! then REx refinement over independent islands.

mod rex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use rex::{rex_refine, rex_select, selection_frequencies, RefineOutcome, RexArm, RexConfig};

use crate::arc::{CandidateEvaluation, Origin, Program, ProgramId, Provenance, Task};
use crate::executor::{evaluate_batch, Executor, DEFAULT_TIMEOUT_MS};
use crate::gateway::{
    build_sampling_prompt, chat_complete, parse_completion, ChatBackend, ChatMessage, GatewayError, ParseFailure,
    SamplingParams,
};
use crate::seed;

const SAMPLE_STREAM: u64 = 1;
const REFINE_STREAM: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("no sampled candidate is free of train-side errors")]
    NoViableSeeds,
    #[error("invalid search configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Sample,
    Refine,
}

/// One LLM completion and what became of it. Parse failures carry no
/// program and consume budget all the same.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub phase: Phase,
    pub program_id: ProgramId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<ProgramId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub island: Option<u32>,
    pub program: Option<Program>,
    pub evaluation: Option<CandidateEvaluation>,
    pub parse_failure: Option<ParseFailure>,
}

impl Attempt {
    pub fn candidate(&self) -> Option<(&Program, &CandidateEvaluation)> {
        Some((self.program.as_ref()?, self.evaluation.as_ref()?))
    }

    pub fn is_train_perfect(&self) -> bool {
        self.evaluation.as_ref().is_some_and(|e| e.is_train_perfect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchBudget {
    pub sample_budget: usize,
    pub refine_budget: usize,
    pub batch_size: usize,
    pub early_stop_perfect: usize,
    /// Run refinement even when sampling already reached the early-stop
    /// threshold.
    pub refine_after_early_stop: bool,
    /// Hand sampling budget left over by an early stop to refinement.
    pub transfer_unused_sample_budget: bool,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            sample_budget: 3000,
            refine_budget: 3000,
            batch_size: 50,
            early_stop_perfect: 100,
            refine_after_early_stop: false,
            transfer_unused_sample_budget: false,
        }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<(), String> {
        if self.sample_budget == 0 || self.batch_size == 0 || self.early_stop_perfect == 0 {
            return Err("sample_budget, batch_size and early_stop_perfect must be positive".into());
        }
        Ok(())
    }
}

/// Backends and per-run settings shared by both phases.
#[derive(Clone, Copy)]
pub struct SearchContext<'a> {
    pub chat: &'a dyn ChatBackend,
    pub executor: &'a dyn Executor,
    /// Template; `n_completions` and `seed` are overwritten per request.
    pub sampling: &'a SamplingParams,
    pub iteration: u32,
    pub seed: u64,
    pub timeout_ms: u64,
    pub parallelism: usize,
    pub few_shot: Option<(&'a Task, &'a Program)>,
}

impl<'a> SearchContext<'a> {
    pub fn new(chat: &'a dyn ChatBackend, executor: &'a dyn Executor, sampling: &'a SamplingParams) -> Self {
        SearchContext {
            chat,
            executor,
            sampling,
            iteration: 0,
            seed: 0,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            parallelism: 4,
            few_shot: None,
        }
    }
}

/// Requests `n` completions for one prompt, parses and executes them, and
/// numbers the resulting attempts from `first_id`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_completions(
    task: &Task,
    messages: &[ChatMessage],
    n: usize,
    chat_seed: u64,
    first_id: u64,
    phase: Phase,
    island: Option<u32>,
    parent: Option<ProgramId>,
    ctx: &SearchContext<'_>,
) -> Result<Vec<Attempt>, GatewayError> {
    let params = SamplingParams {
        n_completions: n,
        seed: chat_seed,
        ..ctx.sampling.clone()
    };
    let texts = chat_complete(ctx.chat, messages, &params)?;
    let mut attempts = Vec::with_capacity(n);
    let mut programs = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        let id = ProgramId(first_id + i as u64);
        let mut attempt = Attempt {
            phase,
            program_id: id,
            parent,
            island,
            program: None,
            evaluation: None,
            parse_failure: None,
        };
        match parse_completion(text) {
            Ok(source) => {
                let program = Program {
                    id,
                    source,
                    provenance: match parent {
                        Some(parent) => Provenance::Refined { parent },
                        None => Provenance::Sampled,
                    },
                    origin: Origin {
                        iteration: ctx.iteration,
                        island,
                        model_tag: ctx.sampling.model_tag.clone(),
                        seed: chat_seed,
                    },
                };
                programs.push(program.clone());
                attempt.program = Some(program);
            }
            Err(f) => attempt.parse_failure = Some(f),
        }
        attempts.push(attempt);
    }
    let mut evals = evaluate_batch(ctx.executor, &programs, task, ctx.parallelism, ctx.timeout_ms).into_iter();
    for a in attempts.iter_mut().filter(|a| a.program.is_some()) {
        a.evaluation = evals.next();
    }
    Ok(attempts)
}

#[derive(Debug, Default)]
pub struct SampleOutcome {
    pub attempts: Vec<Attempt>,
    pub early_stopped: bool,
    pub interrupted: Option<GatewayError>,
}

/// Samples in batches until the budget is spent or enough candidates are
/// perfect on the train pairs.
pub fn sample_phase(task: &Task, budget: &SearchBudget, ctx: &SearchContext<'_>, next_id: &mut u64) -> SampleOutcome {
    let messages = build_sampling_prompt(task, ctx.few_shot);
    let mut out = SampleOutcome::default();
    let mut perfect = 0;
    let mut batch = 0u64;
    while out.attempts.len() < budget.sample_budget {
        let n = budget.batch_size.min(budget.sample_budget - out.attempts.len());
        let chat_seed = seed::derive_seed(ctx.seed, &[SAMPLE_STREAM, batch]);
        match run_completions(task, &messages, n, chat_seed, *next_id, Phase::Sample, None, None, ctx) {
            Ok(attempts) => {
                *next_id += n as u64;
                perfect += attempts.iter().filter(|a| a.is_train_perfect()).count();
                out.attempts.extend(attempts);
            }
            Err(e) => {
                log::warn!("{}: sampling interrupted: {e}", task.task_id());
                out.interrupted = Some(e);
                break;
            }
        }
        batch += 1;
        if perfect >= budget.early_stop_perfect {
            out.early_stopped = true;
            break;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub task_id: String,
    pub attempts: Vec<Attempt>,
    pub sample_early_stopped: bool,
    pub refine_early_stopped: bool,
    pub refine_skipped: bool,
    pub no_viable_seeds: bool,
    /// Backend error that cut the search short; partial attempts are kept.
    pub interrupted: Option<String>,
}

impl SearchResult {
    pub fn candidates(&self) -> impl Iterator<Item = (&Program, &CandidateEvaluation)> {
        self.attempts.iter().filter_map(Attempt::candidate)
    }

    pub fn evaluations(&self) -> Vec<CandidateEvaluation> {
        self.candidates().map(|(_, e)| e.clone()).collect()
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.attempts.iter().filter(|a| a.phase == phase).count()
    }

    pub fn parse_failures(&self) -> usize {
        self.attempts.iter().filter(|a| a.parse_failure.is_some()).count()
    }

    pub fn perfect_count(&self) -> usize {
        self.attempts.iter().filter(|a| a.is_train_perfect()).count()
    }

    /// Hex sha256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("search result serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Sampling followed by REx refinement seeded with the sampled candidates.
pub fn run_search(
    task: &Task,
    budget: &SearchBudget,
    rex: &RexConfig,
    ctx: &SearchContext<'_>,
) -> Result<SearchResult, SearchError> {
    budget.validate().map_err(SearchError::Config)?;
    rex.validate().map_err(SearchError::Config)?;
    // Ids stay unique when a task's candidates are pooled across iterations.
    let mut next_id = u64::from(ctx.iteration) << 32;
    let sample = sample_phase(task, budget, ctx, &mut next_id);
    let mut result = SearchResult {
        task_id: task.task_id().to_string(),
        sample_early_stopped: sample.early_stopped,
        refine_early_stopped: false,
        refine_skipped: false,
        no_viable_seeds: false,
        interrupted: sample.interrupted.map(|e| e.to_string()),
        attempts: sample.attempts,
    };
    if result.interrupted.is_some() {
        return Ok(result);
    }
    let mut refine_budget = budget.refine_budget;
    if result.sample_early_stopped {
        if !budget.refine_after_early_stop {
            result.refine_skipped = true;
            return Ok(result);
        }
        if budget.transfer_unused_sample_budget {
            refine_budget += budget.sample_budget - result.attempts.len();
        }
    }
    if refine_budget == 0 {
        result.refine_skipped = true;
        return Ok(result);
    }
    let rex = RexConfig {
        refinement_budget: refine_budget,
        seed: seed::derive_seed(ctx.seed, &[REFINE_STREAM, rex.seed]),
        ..rex.clone()
    };
    let initial: Vec<_> = result.attempts.iter().filter_map(Attempt::candidate).collect();
    match rex_refine(task, &initial, &rex, budget.early_stop_perfect, ctx, &mut next_id) {
        Ok(refined) => {
            result.refine_early_stopped = refined.early_stopped;
            result.interrupted = refined.interrupted.map(|e| e.to_string());
            result.attempts.extend(refined.attempts);
        }
        Err(SearchError::NoViableSeeds) => result.no_viable_seeds = true,
        Err(e) => return Err(e),
    }
    Ok(result)
}
