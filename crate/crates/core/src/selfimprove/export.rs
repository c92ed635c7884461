//! Chat-format dataset files: one JSON record per line, each holding the
//! exact prompt the model would see plus the solution as the assistant turn.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RefinementExample, RelabeledExample, SelfImproveError};
use crate::arc::{CandidateEvaluation, ProgramId, Provenance};
use crate::executor::{evaluate_program, Executor};
use crate::gateway::prompt::fence_python;
use crate::gateway::{build_refinement_prompt, build_sampling_prompt, ChatMessage, Role};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Sampling,
    Refinement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub task_id: String,
    pub iteration: u32,
    pub kind: DatasetKind,
    pub program_id: ProgramId,
    pub provenance: Provenance,
    pub model_tag: String,
    /// Train-pair order shown in the prompt, as indices into the task.
    pub train_order: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub messages: Vec<ChatMessage>,
    pub meta: RecordMeta,
}

fn train_order(n: usize, shuffle: bool, seed: u64, task_id: &str, id: ProgramId) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut seed::rng(seed, &[seed::str_key(task_id), id.0]));
    }
    order
}

fn verify_sampling(ex: &RelabeledExample, executor: &dyn Executor, timeout_ms: u64) -> Result<(), SelfImproveError> {
    let fail = || SelfImproveError::VerificationFailure {
        task: ex.source_task_id.clone(),
        program: ex.solution.id,
    };
    let task = &ex.synthetic_task;
    let eval = evaluate_program(executor, &ex.solution, task, timeout_ms).map_err(|_| fail())?;
    let expected = task.truth().ok_or_else(fail)?;
    if eval.is_train_perfect() && eval.solves(expected) {
        Ok(())
    } else {
        Err(fail())
    }
}

/// Re-executes every solution against its synthetic task, then renders one
/// record per example. `augment_shuffle` permutes the train pairs with a
/// per-record seed.
pub fn sampling_records(
    examples: &[RelabeledExample],
    augment_shuffle: bool,
    seed: u64,
    executor: &dyn Executor,
    timeout_ms: u64,
) -> Result<Vec<DatasetRecord>, SelfImproveError> {
    examples
        .par_iter()
        .map(|ex| verify_sampling(ex, executor, timeout_ms))
        .collect::<Result<Vec<()>, _>>()?;
    Ok(examples
        .iter()
        .map(|ex| {
            let p = &ex.solution;
            let order = train_order(
                ex.synthetic_task.train().len(),
                augment_shuffle,
                seed,
                &ex.source_task_id,
                p.id,
            );
            let task = ex.synthetic_task.with_train_order(&order);
            let mut messages = build_sampling_prompt(&task, None);
            messages.push(ChatMessage::new(Role::Assistant, fence_python(&p.source)));
            DatasetRecord {
                messages,
                meta: RecordMeta {
                    task_id: ex.source_task_id.clone(),
                    iteration: p.origin.iteration,
                    kind: DatasetKind::Sampling,
                    program_id: p.id,
                    provenance: p.provenance.clone(),
                    model_tag: p.origin.model_tag.clone(),
                    train_order: order,
                },
            }
        })
        .collect())
}

fn verify_refinement(ex: &RefinementExample, executor: &dyn Executor, timeout_ms: u64) -> Result<(), SelfImproveError> {
    let eval = evaluate_program(executor, &ex.child, &ex.task, timeout_ms);
    match eval {
        Ok(e) if e.is_train_perfect() && e.train_outcomes == ex.child_eval.train_outcomes => Ok(()),
        _ => Err(SelfImproveError::VerificationFailure {
            task: ex.task.task_id().to_string(),
            program: ex.child.id,
        }),
    }
}

/// Renders (parent feedback prompt, fixed child) records after re-checking
/// that each child still passes the train pairs.
pub fn refinement_records(
    examples: &[RefinementExample],
    augment_shuffle: bool,
    seed: u64,
    executor: &dyn Executor,
    timeout_ms: u64,
) -> Result<Vec<DatasetRecord>, SelfImproveError> {
    examples
        .par_iter()
        .map(|ex| verify_refinement(ex, executor, timeout_ms))
        .collect::<Result<Vec<()>, _>>()?;
    Ok(examples
        .iter()
        .map(|ex| {
            let c = &ex.child;
            let task_id = ex.task.task_id();
            let order = train_order(ex.task.train().len(), augment_shuffle, seed, task_id, c.id);
            let task = ex.task.with_train_order(&order);
            let parent_eval = CandidateEvaluation {
                train_outcomes: order
                    .iter()
                    .map(|&i| ex.parent_eval.train_outcomes[i].clone())
                    .collect(),
                ..ex.parent_eval.clone()
            };
            let mut messages = build_refinement_prompt(&task, &ex.parent, &parent_eval);
            messages.push(ChatMessage::new(Role::Assistant, fence_python(&c.source)));
            DatasetRecord {
                messages,
                meta: RecordMeta {
                    task_id: task_id.to_string(),
                    iteration: c.origin.iteration,
                    kind: DatasetKind::Refinement,
                    program_id: c.id,
                    provenance: c.provenance.clone(),
                    model_tag: c.origin.model_tag.clone(),
                    train_order: order,
                },
            }
        })
        .collect())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SelfImproveError {
    SelfImproveError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes records as JSON lines; returns the file's hex sha256.
pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<String, SelfImproveError> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r).map_err(|e| io_err(path, e))?;
        bytes.push(b'\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, SelfImproveError> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| io_err(path, e))?;
            serde_json::from_str(&l).map_err(|e| io_err(path, e))
        })
        .collect()
}
