//! Per-task and aggregate scores computed from an archive alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::archive::{task_slices, ArchiveRecord, TaskSlice};
use super::{vote_slice, OrchestratorError};
use crate::arc::Grid;
use crate::ensemble::{oracle_score, score_task, VoteConfig};
use crate::gateway::EmbeddingBackend;
use crate::search::Phase;
use crate::selfimprove::diversity;

/// Solutions embedded per task for the diversity column.
pub const DIVERSITY_SAMPLE: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: String,
    pub attempts: usize,
    pub sample_attempts: usize,
    pub refine_attempts: usize,
    pub parse_failures: usize,
    /// Train-perfect candidates, the solutions diversity is measured over.
    pub perfect_count: usize,
    /// Vote over sampling-phase candidates only. `None` without truth.
    pub sample_solved: Option<bool>,
    /// Vote over all candidates.
    pub sample_refine_solved: Option<bool>,
    pub oracle_solved: Option<bool>,
    /// Mean pairwise cosine distance between solutions; `None` under two.
    pub diversity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tasks: usize,
    /// Tasks with ground truth, the denominator of the accuracies.
    pub scored_tasks: usize,
    pub total_attempts: usize,
    pub sample_accuracy: Option<f64>,
    pub sample_refine_accuracy: Option<f64>,
    pub oracle_accuracy: Option<f64>,
    pub mean_diversity: Option<f64>,
    pub mean_diversity_solved: Option<f64>,
    pub mean_diversity_unsolved: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub iteration: Option<u32>,
    pub vote: VoteConfig,
    pub tasks: Vec<TaskReport>,
    pub aggregate: Aggregate,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn task_report(
    task_id: &str,
    slice: &TaskSlice,
    truth: Option<&[Grid]>,
    vote: &VoteConfig,
    embedder: &dyn EmbeddingBackend,
) -> Result<TaskReport, OrchestratorError> {
    let solved = |phase: Option<Phase>| -> Result<Option<bool>, OrchestratorError> {
        let Some(t) = truth else { return Ok(None) };
        let ranked = vote_slice(slice, phase, vote);
        Ok(Some(match ranked {
            Ok(r) => score_task(&r, Some(t), vote.n_output)?,
            Err(_) => false,
        }))
    };
    let evals: Vec<_> = slice.candidates().map(|(_, e)| e.clone()).collect();
    let solutions: Vec<&str> = slice
        .candidates()
        .filter(|(_, e)| e.is_train_perfect())
        .map(|(p, _)| p.source.as_str())
        .collect();
    let sample: Vec<&str> = solutions.iter().take(DIVERSITY_SAMPLE).copied().collect();
    let div = if sample.len() >= 2 {
        Some(diversity(&sample, embedder)?)
    } else {
        None
    };
    Ok(TaskReport {
        task_id: task_id.to_string(),
        attempts: slice.attempts.len(),
        sample_attempts: slice.count(Phase::Sample),
        refine_attempts: slice.count(Phase::Refine),
        parse_failures: slice.attempts.iter().filter(|a| a.parse_failure.is_some()).count(),
        perfect_count: solutions.len(),
        sample_solved: solved(Some(Phase::Sample))?,
        sample_refine_solved: solved(None)?,
        oracle_solved: truth.map(|t| oracle_score(&evals, Some(t))).transpose()?,
        diversity: div,
    })
}

/// Scores every task in `records` (one iteration, or all when `None`).
/// Truth-dependent columns are `None` for tasks missing from `truth`.
pub fn build_report(
    records: &[ArchiveRecord],
    iteration: Option<u32>,
    truth: Option<&BTreeMap<String, Vec<Grid>>>,
    vote: &VoteConfig,
    embedder: &dyn EmbeddingBackend,
) -> Result<Report, OrchestratorError> {
    let slices = task_slices(records, iteration);
    let mut tasks = Vec::with_capacity(slices.len());
    for (id, slice) in &slices {
        let t = truth.and_then(|m| m.get(id)).map(Vec::as_slice);
        tasks.push(task_report(id, slice, t, vote, embedder)?);
    }
    let scored: Vec<&TaskReport> = tasks.iter().filter(|t| t.oracle_solved.is_some()).collect();
    let rate =
        |f: fn(&TaskReport) -> Option<bool>| mean(scored.iter().map(|t| if f(t) == Some(true) { 1.0 } else { 0.0 }));
    let aggregate = Aggregate {
        tasks: tasks.len(),
        scored_tasks: scored.len(),
        total_attempts: tasks.iter().map(|t| t.attempts).sum(),
        sample_accuracy: rate(|t| t.sample_solved),
        sample_refine_accuracy: rate(|t| t.sample_refine_solved),
        oracle_accuracy: rate(|t| t.oracle_solved),
        mean_diversity: mean(tasks.iter().filter_map(|t| t.diversity)),
        mean_diversity_solved: mean(
            tasks
                .iter()
                .filter(|t| t.sample_refine_solved == Some(true))
                .filter_map(|t| t.diversity),
        ),
        mean_diversity_unsolved: mean(
            tasks
                .iter()
                .filter(|t| t.sample_refine_solved == Some(false))
                .filter_map(|t| t.diversity),
        ),
    };
    Ok(Report {
        iteration,
        vote: vote.clone(),
        tasks,
        aggregate,
    })
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per task; empty cells for unknown values.
    pub fn to_csv(&self) -> String {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut out = String::from(
            "task_id,attempts,sample_attempts,refine_attempts,parse_failures,perfect_count,\
             sample_solved,sample_refine_solved,oracle_solved,diversity\n",
        );
        for t in &self.tasks {
            let id = if t.task_id.contains([',', '"', '\n']) {
                format!("\"{}\"", t.task_id.replace('"', "\"\""))
            } else {
                t.task_id.clone()
            };
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{},{},{},{},{}",
                t.attempts,
                t.sample_attempts,
                t.refine_attempts,
                t.parse_failures,
                t.perfect_count,
                opt(t.sample_solved),
                opt(t.sample_refine_solved),
                opt(t.oracle_solved),
                opt(t.diversity.map(|d| format!("{d:.6}"))),
            );
        }
        out
    }
}
