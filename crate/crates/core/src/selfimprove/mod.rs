//! Turning search traces into fine-tuning data.
//!
//! Every executed program is a correct solution to *some* task: the one whose
//! outputs are whatever the program produced. [`relabel`] builds that task.
//! Selection strategies then pick which examples to keep per task, [`dedup`]
//! removes near-duplicate solutions and [`export`] writes chat-format files.

pub mod export;
pub mod select;
pub mod ttt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arc::{render_grid, CandidateEvaluation, Grid, Pair, Program, ProgramId, Task};
use crate::gateway::{cosine_similarity, embed, EmbeddingBackend, GatewayError};
use crate::registry::UnknownEntry;

pub use export::{
    read_dataset, refinement_records, sampling_records, write_dataset, DatasetKind, DatasetRecord, RecordMeta,
};
pub use select::{
    refinement_selectors, sampling_selectors, select_refinement_data, select_sampling_data, RefinementSelector,
    SamplingSelector, Scored, SelectionPolicy,
};
pub use ttt::{ttt_allocate, ttt_select};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelfImproveError {
    #[error("no selectable candidates for task {0}")]
    EmptySlice(String),
    #[error("strategy `{0}` needs ground truth, which is not available")]
    TruthRequired(String),
    #[error(transparent)]
    UnknownStrategy(#[from] UnknownEntry),
    #[error("example {program} of task {task} no longer reproduces its outputs")]
    VerificationFailure { task: String, program: ProgramId },
    #[error("need at least two solutions, got {0}")]
    TooFewSolutions(usize),
    #[error(transparent)]
    Embedding(#[from] GatewayError),
    #[error(transparent)]
    Vote(#[from] crate::ensemble::VoteError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    /// Some train or test input did not yield a valid grid.
    IncompleteExecution,
    /// Outcome counts do not match the task.
    ShapeMismatch,
}

/// A program paired with the task it solves by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct RelabeledExample {
    /// Source inputs with the program's outputs as targets; test outputs are
    /// the program's test outputs.
    pub synthetic_task: Task,
    pub solution: Program,
    pub source_task_id: String,
}

/// Replaces the task's targets with the program's own outputs. Never reads
/// the source task's ground truth.
pub fn relabel(program: &Program, task: &Task, eval: &CandidateEvaluation) -> Result<RelabeledExample, Rejection> {
    if eval.train_outcomes.len() != task.train().len() || eval.test_outcomes.len() != task.test_inputs().len() {
        return Err(Rejection::ShapeMismatch);
    }
    let train_out: Option<Vec<&Grid>> = eval.train_outcomes.iter().map(|o| o.ok_grid()).collect();
    let test_out = eval.test_grids();
    let (Some(train_out), Some(test_out)) = (train_out, test_out) else {
        return Err(Rejection::IncompleteExecution);
    };
    let train = task
        .train()
        .iter()
        .zip(train_out)
        .map(|(p, y)| Pair {
            input: p.input.clone(),
            output: y.clone(),
        })
        .collect();
    let synthetic_task = Task::new(
        task.task_id(),
        train,
        task.test_inputs().to_vec(),
        Some(test_out.into_iter().cloned().collect()),
    )
    .map_err(|_| Rejection::ShapeMismatch)?;
    Ok(RelabeledExample {
        synthetic_task,
        solution: program.clone(),
        source_task_id: task.task_id().to_string(),
    })
}

/// Parent train-accuracy bins for refinement data. Ordered; the diverse
/// selector cycles through them in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentBin {
    /// No train pair right.
    Zero,
    /// Up to a third of the train pairs right.
    Low,
    /// More than a third, but not all.
    High,
    /// Every train pair right, test output wrong.
    PerfectTrainWrongTest,
}

impl ParentBin {
    pub const ALL: [ParentBin; 4] = [
        ParentBin::Zero,
        ParentBin::Low,
        ParentBin::High,
        ParentBin::PerfectTrainWrongTest,
    ];

    /// `None` for a parent that is already fully correct. Without truth a
    /// train-perfect parent counts as correct.
    pub fn of(parent: &CandidateEvaluation, truth: Option<&[Grid]>) -> Option<ParentBin> {
        let a = parent.train_accuracy;
        if a == 0.0 {
            Some(ParentBin::Zero)
        } else if a <= 1.0 / 3.0 {
            Some(ParentBin::Low)
        } else if a < 1.0 {
            Some(ParentBin::High)
        } else if truth.is_some_and(|t| !parent.solves(t)) {
            Some(ParentBin::PerfectTrainWrongTest)
        } else {
            None
        }
    }
}

/// A refinement that turned an incorrect parent into a child.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementExample {
    /// Without ground truth; the prompt only needs inputs and train targets.
    pub task: Task,
    pub parent: Program,
    pub parent_eval: CandidateEvaluation,
    pub child: Program,
    pub child_eval: CandidateEvaluation,
    pub child_correct: bool,
    pub parent_bin: ParentBin,
}

/// All successful refinements in one task's candidates: children that pass
/// every train pair and the ground-truth test outputs, from parents that did
/// not.
pub fn successful_refinements(
    task: &Task,
    candidates: &[(&Program, &CandidateEvaluation)],
    truth: &[Grid],
) -> Vec<RefinementExample> {
    let by_id: std::collections::HashMap<ProgramId, (&Program, &CandidateEvaluation)> =
        candidates.iter().map(|&(p, e)| (p.id, (p, e))).collect();
    let bare = task.without_truth();
    let mut out = Vec::new();
    for &(child, child_eval) in candidates {
        let Some(parent_id) = child.parent() else { continue };
        let Some(&(parent, parent_eval)) = by_id.get(&parent_id) else {
            continue;
        };
        let child_correct = child_eval.is_train_perfect() && child_eval.solves(truth);
        if !child_correct {
            continue;
        }
        let Some(parent_bin) = ParentBin::of(parent_eval, Some(truth)) else {
            continue;
        };
        out.push(RefinementExample {
            task: bare.clone(),
            parent: parent.clone(),
            parent_eval: parent_eval.clone(),
            child: child.clone(),
            child_eval: child_eval.clone(),
            child_correct,
            parent_bin,
        });
    }
    out
}

/// Literals shorter than this are too common to indicate copying.
pub const HYBRID_MIN_LITERAL: usize = 20;

fn strip_ws(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// False when the program hardcodes one of its own outputs: any computed
/// grid, as a compact nested list or in prompt rendering, appearing in the
/// whitespace-normalized source.
pub fn filter_hybrid(program: &Program, eval: &CandidateEvaluation) -> bool {
    let compact_src = strip_ws(&program.source);
    let spaced_src = collapse_ws(&program.source);
    let grids = eval
        .train_outcomes
        .iter()
        .chain(&eval.test_outcomes)
        .filter_map(|o| o.ok_grid());
    for g in grids {
        let json = g.to_json();
        if json.len() >= HYBRID_MIN_LITERAL && compact_src.contains(&json) {
            return false;
        }
        let rendered = collapse_ws(&render_grid(g));
        if rendered.len() >= HYBRID_MIN_LITERAL && spaced_src.contains(&rendered) {
            return false;
        }
    }
    true
}

/// Greedy near-duplicate removal in input order: a text is dropped when
/// its embedding is at least `threshold`-similar to an already kept one
/// (up to float rounding, so identical texts always match at 1.0).
/// Returns the kept indices, ascending.
pub fn dedup(texts: &[&str], embedder: &dyn EmbeddingBackend, threshold: f64) -> Result<Vec<usize>, SelfImproveError> {
    let owned: Vec<String> = texts.iter().map(|t| t.to_string()).collect();
    let mut vectors = Vec::with_capacity(owned.len());
    for chunk in owned.chunks(256) {
        vectors.extend(embed(embedder, chunk)?);
    }
    let mut kept: Vec<usize> = Vec::new();
    for (i, v) in vectors.iter().enumerate() {
        if kept
            .iter()
            .all(|&j| cosine_similarity(v, &vectors[j]) + 1e-9 < threshold)
        {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Mean pairwise cosine distance between solution embeddings.
pub fn diversity(texts: &[&str], embedder: &dyn EmbeddingBackend) -> Result<f64, SelfImproveError> {
    if texts.len() < 2 {
        return Err(SelfImproveError::TooFewSolutions(texts.len()));
    }
    let owned: Vec<String> = texts.iter().map(|t| t.to_string()).collect();
    let v = embed(embedder, &owned)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            total += 1.0 - cosine_similarity(&v[i], &v[j]);
            pairs += 1;
        }
    }
    // Rounding can put identical embeddings a hair below zero.
    Ok((total / pairs as f64).max(0.0))
}

#[cfg(test)]
mod tests;
