//! One self-improvement iteration: search every task, archive every
//! attempt, then turn the archive into fine-tuning data.
//!
//! All outputs of an iteration live under `output_dir`:
//!
//! ```text
//! archive.jsonl            every attempt of every iteration
//! iter_<i>/sampling.jsonl  chat-format datasets
//! iter_<i>/refinement.jsonl
//! iter_<i>/report.json     per-task scores, plus report.csv
//! iter_<i>/manifest.json   written last; its presence marks completion
//! ```
//!
//! Rerunning an interrupted iteration resumes it: finished tasks are taken
//! from the archive, a partially written task is searched again and only
//! its missing records are appended.

pub mod archive;
pub mod backends;
pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arc::{load_tasks, ArcError, CandidateEvaluation, Grid, Program, ProgramId, Task};
use crate::ensemble::{oracle_score, score_task, weighted_majority_vote, VoteConfig, VoteError, VotePattern};
use crate::executor::Executor;
use crate::gateway::{EmbeddingBackend, GatewayError, SamplingParams};
use crate::registry::UnknownEntry;
use crate::search::{run_search, Phase, RexConfig, SearchBudget, SearchContext, SearchResult};
use crate::seed;
use crate::selfimprove::{
    dedup, filter_hybrid, refinement_records, refinement_selectors, sampling_records, sampling_selectors,
    select_refinement_data, select_sampling_data, successful_refinements, ttt_select, write_dataset, DatasetKind,
    DatasetRecord, SelectionPolicy, SelfImproveError,
};

pub use archive::{read_archive, task_slices, ArchiveRecord, ArchiveWriter, Entry, TaskDone, TaskSlice};
pub use backends::Backends;
pub use config::{DedupScope, FinetuneFrom, Mode, ModelEntry, ModelRegistry, RunConfig};
pub use report::{build_report, Report, TaskReport};

const FEW_SHOT_STREAM: u64 = 3;
const DATASET_STREAM: u64 = 4;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("corrupt archive {path} at byte {offset}: {reason}")]
    CorruptArchive { path: String, offset: u64, reason: String },
    #[error("archived attempt {logical_time} of task {task_id} differs from its replay; was the config changed?")]
    ResumeMismatch { task_id: String, logical_time: u64 },
    #[error(transparent)]
    Task(#[from] ArcError),
    #[error(transparent)]
    SelfImprove(#[from] SelfImproveError),
    #[error(transparent)]
    Vote(#[from] VoteError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl From<UnknownEntry> for OrchestratorError {
    fn from(e: UnknownEntry) -> Self {
        OrchestratorError::Config(e.to_string())
    }
}

impl OrchestratorError {
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            OrchestratorError::Config(_) | OrchestratorError::SelfImprove(SelfImproveError::UnknownStrategy(_))
        )
    }
}

/// Loads every task under `paths`, sorted by id. Duplicate ids are an error.
pub fn load_task_set(paths: &[impl AsRef<Path>]) -> Result<Vec<Task>, OrchestratorError> {
    let mut tasks = Vec::new();
    for p in paths {
        tasks.extend(load_tasks(p.as_ref())?);
    }
    tasks.sort_by(|a, b| a.task_id().cmp(b.task_id()));
    if let Some(w) = tasks.windows(2).find(|w| w[0].task_id() == w[1].task_id()) {
        return Err(OrchestratorError::Config(format!(
            "task `{}` appears twice",
            w[0].task_id()
        )));
    }
    if tasks.is_empty() {
        return Err(OrchestratorError::Config("no tasks found".into()));
    }
    Ok(tasks)
}

/// Ground truth by task id. Reads truth; never call in test-time mode.
pub fn truth_map(tasks: &[Task]) -> BTreeMap<String, Vec<Grid>> {
    tasks
        .iter()
        .filter_map(|t| t.truth().map(|g| (t.task_id().to_string(), g.to_vec())))
        .collect()
}

/// Ranked patterns over the slice's candidates, restricted to one phase
/// when given. Programs that hardcode their outputs do not vote.
pub fn vote_slice(slice: &TaskSlice, phase: Option<Phase>, vote: &VoteConfig) -> Result<Vec<VotePattern>, VoteError> {
    let pool: Vec<CandidateEvaluation> = slice
        .attempts
        .iter()
        .filter(|a| phase.is_none_or(|p| a.phase == p))
        .filter_map(|a| a.candidate())
        .filter(|(p, e)| filter_hybrid(p, e))
        .map(|(_, e)| e.clone())
        .collect();
    weighted_majority_vote(&pool, vote)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskVote {
    pub task_id: String,
    pub patterns: Vec<VotePattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solved: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<bool>,
}

/// Votes every task in `slices`. Tasks with no complete candidate get an
/// empty ranking.
pub fn vote_archive(
    slices: &BTreeMap<String, TaskSlice>,
    truth: Option<&BTreeMap<String, Vec<Grid>>>,
    vote: &VoteConfig,
) -> Result<Vec<TaskVote>, OrchestratorError> {
    let mut out = Vec::new();
    for (id, slice) in slices {
        let patterns = match vote_slice(slice, None, vote) {
            Ok(p) => p,
            Err(VoteError::EmptyPool) => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let t = truth.and_then(|m| m.get(id)).map(Vec::as_slice);
        let evals: Vec<CandidateEvaluation> = slice.candidates().map(|(_, e)| e.clone()).collect();
        out.push(TaskVote {
            task_id: id.clone(),
            solved: t.map(|t| score_task(&patterns, Some(t), vote.n_output)).transpose()?,
            oracle: t.map(|t| oracle_score(&evals, Some(t))).transpose()?,
            patterns,
        });
    }
    Ok(out)
}

/// Weighted category sampling of `n` candidates per task, for test-time
/// training. Uses train accuracy only.
pub fn ttt_select_archive(
    slices: &BTreeMap<String, TaskSlice>,
    n: usize,
    vote: &VoteConfig,
    seed: u64,
) -> Result<BTreeMap<String, Vec<ProgramId>>, OrchestratorError> {
    let mut out = BTreeMap::new();
    for (id, slice) in slices {
        let pool: Vec<CandidateEvaluation> = slice
            .candidates()
            .filter(|(p, e)| filter_hybrid(p, e))
            .map(|(_, e)| e.clone())
            .collect();
        if pool.is_empty() {
            continue;
        }
        let mut rng = seed::rng(seed, &[seed::str_key(id)]);
        out.insert(id.clone(), ttt_select(&pool, n, vote, &mut rng)?);
    }
    Ok(out)
}

/// How to turn an archive into one dataset file.
#[derive(Clone, Debug)]
pub struct DatasetSpec<'a> {
    pub kind: DatasetKind,
    pub policy: &'a SelectionPolicy,
    pub mode: Mode,
    pub vote: &'a VoteConfig,
    pub augment_shuffle: bool,
    /// `None` skips deduplication.
    pub dedup_threshold: Option<f64>,
    pub dedup_scope: DedupScope,
    pub seed: u64,
    pub timeout_ms: u64,
}

fn dedup_groups<T>(
    groups: Vec<Vec<T>>,
    source: impl Fn(&T) -> &str,
    spec: &DatasetSpec<'_>,
    embedder: &dyn EmbeddingBackend,
) -> Result<Vec<T>, OrchestratorError> {
    let Some(threshold) = spec.dedup_threshold else {
        return Ok(groups.into_iter().flatten().collect());
    };
    let batches: Vec<Vec<T>> = match spec.dedup_scope {
        DedupScope::Pooled => vec![groups.into_iter().flatten().collect()],
        DedupScope::PerTask => groups,
    };
    let mut out = Vec::new();
    for batch in batches {
        if batch.is_empty() {
            continue;
        }
        let texts: Vec<&str> = batch.iter().map(&source).collect();
        let kept = dedup(&texts, embedder, threshold)?;
        let mut keep = vec![false; batch.len()];
        for i in kept {
            keep[i] = true;
        }
        out.extend(batch.into_iter().zip(keep).filter(|(_, k)| *k).map(|(x, _)| x));
    }
    Ok(out)
}

/// Selects, deduplicates, verifies and renders one dataset. Tasks without
/// eligible candidates contribute nothing. In test-time mode no ground
/// truth is read, and refinement data cannot be built.
pub fn build_dataset(
    slices: &BTreeMap<String, TaskSlice>,
    tasks: &[Task],
    spec: &DatasetSpec<'_>,
    executor: &dyn Executor,
    embedder: &dyn EmbeddingBackend,
) -> Result<Vec<DatasetRecord>, OrchestratorError> {
    let policy_for = |task_id: &str| SelectionPolicy {
        seed: seed::derive_seed(spec.seed, &[spec.policy.seed, seed::str_key(task_id)]),
        ..spec.policy.clone()
    };
    match spec.kind {
        DatasetKind::Sampling => {
            let registry = sampling_selectors(spec.vote);
            let mut groups = Vec::new();
            for task in tasks {
                let Some(slice) = slices.get(task.task_id()) else {
                    continue;
                };
                let cands: Vec<(&Program, &CandidateEvaluation)> = slice.candidates().collect();
                let truth = match spec.mode {
                    Mode::Train => task.truth(),
                    Mode::TestTime => None,
                };
                match select_sampling_data(task, &cands, truth, &policy_for(task.task_id()), &registry) {
                    Ok(examples) => groups.push(examples),
                    Err(SelfImproveError::EmptySlice(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            let examples = dedup_groups(groups, |x| x.solution.source.as_str(), spec, embedder)?;
            Ok(sampling_records(
                &examples,
                spec.augment_shuffle,
                spec.seed,
                executor,
                spec.timeout_ms,
            )?)
        }
        DatasetKind::Refinement => {
            if spec.mode == Mode::TestTime {
                return Err(OrchestratorError::Config(
                    "refinement data needs ground truth and is not built in test-time mode".into(),
                ));
            }
            let registry = refinement_selectors();
            let mut groups = Vec::new();
            for task in tasks {
                let Some(slice) = slices.get(task.task_id()) else {
                    continue;
                };
                let Some(truth) = task.truth() else { continue };
                let cands: Vec<(&Program, &CandidateEvaluation)> = slice.candidates().collect();
                let pool = successful_refinements(task, &cands, truth);
                match select_refinement_data(task.task_id(), &pool, &policy_for(task.task_id()), &registry) {
                    Ok(examples) => groups.push(examples),
                    Err(SelfImproveError::EmptySlice(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            let examples = dedup_groups(groups, |x| x.child.source.as_str(), spec, embedder)?;
            Ok(refinement_records(
                &examples,
                spec.augment_shuffle,
                spec.seed,
                executor,
                spec.timeout_ms,
            )?)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCounters {
    pub task_id: String,
    pub attempts: usize,
    pub sample_attempts: usize,
    pub refine_attempts: usize,
    pub parse_failures: usize,
    pub perfect_count: usize,
    /// `None` in test-time mode.
    pub solved_vote: Option<bool>,
    pub solved_oracle: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDigest {
    pub kind: DatasetKind,
    /// File name inside the iteration directory.
    pub file: String,
    pub records: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationManifest {
    pub iteration: u32,
    pub mode: Mode,
    pub model_tag: String,
    /// Registry tag the next fine-tune should start from.
    pub finetune_from: String,
    pub min_p_forwarded: bool,
    pub config_hash: String,
    pub budget: SearchBudget,
    pub rex: RexConfig,
    pub tasks: Vec<TaskCounters>,
    pub failed_tasks: usize,
    pub datasets: Vec<DatasetDigest>,
}

impl IterationManifest {
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> OrchestratorError {
    OrchestratorError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), OrchestratorError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Where each task of an iteration stands in the archive.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ResumeState {
    pub done: Vec<String>,
    /// Tasks with some attempts archived but no completion record.
    pub partial: Vec<(String, usize)>,
    pub pending: Vec<String>,
}

pub fn resume_state(records: &[ArchiveRecord], tasks: &[Task], iteration: u32) -> ResumeState {
    let slices = task_slices(records, Some(iteration));
    let mut state = ResumeState::default();
    for t in tasks {
        let id = t.task_id().to_string();
        match slices.get(&id) {
            Some(s) if s.done.is_some() => state.done.push(id),
            Some(s) => state.partial.push((id, s.attempts.len())),
            None => state.pending.push(id),
        }
    }
    state
}

/// A solved task from the previous iteration, shown as a worked example.
/// Train mode requires a ground-truth solve; test-time mode a train-perfect
/// program. The shortest qualifying program is used.
fn few_shot_pool<'a>(records: &'a [ArchiveRecord], tasks: &'a [Task], config: &RunConfig) -> Vec<(Task, Program)> {
    let Some(prev) = config.iteration.checked_sub(1) else {
        return Vec::new();
    };
    let slices = task_slices(records, Some(prev));
    let mut pool = Vec::new();
    for task in tasks {
        let Some(slice) = slices.get(task.task_id()) else {
            continue;
        };
        let truth = match config.mode {
            Mode::Train => task.truth(),
            Mode::TestTime => None,
        };
        let best = slice
            .candidates()
            .filter(|(p, e)| e.is_train_perfect() && truth.is_none_or(|t| e.solves(t)) && filter_hybrid(p, e))
            .min_by_key(|(p, _)| (p.source.len(), p.id));
        if let Some((p, _)) = best {
            pool.push((task.without_truth(), p.clone()));
        }
    }
    pool
}

fn pick_few_shot<'a>(
    pool: &'a [(Task, Program)],
    task_id: &str,
    config: &RunConfig,
) -> Option<(&'a Task, &'a Program)> {
    let others: Vec<&(Task, Program)> = pool.iter().filter(|(t, _)| t.task_id() != task_id).collect();
    if others.is_empty() {
        return None;
    }
    let mut rng = seed::rng(
        config.seed,
        &[FEW_SHOT_STREAM, u64::from(config.iteration), seed::str_key(task_id)],
    );
    let (t, p) = others[rng.random_range(0..others.len())];
    Some((t, p))
}

/// Per-task search seed: independent of task order and parallelism.
pub fn task_seed(config: &RunConfig, task_id: &str) -> u64 {
    seed::derive_seed(config.seed, &[u64::from(config.iteration), seed::str_key(task_id)])
}

fn search_one(
    task: &Task,
    config: &RunConfig,
    backends: &Backends,
    params: &SamplingParams,
    few_shot: Option<(&Task, &Program)>,
) -> Result<SearchResult, String> {
    let ctx = SearchContext {
        iteration: config.iteration,
        seed: task_seed(config, task.task_id()),
        timeout_ms: config.timeout_ms,
        parallelism: config.search_parallelism,
        few_shot,
        ..SearchContext::new(&*backends.chat, &*backends.executor, params)
    };
    run_search(task, &config.budget, &config.rex, &ctx).map_err(|e| e.to_string())
}

/// Appends one task's attempts, skipping the first `skip` which must
/// already be archived identically, then its completion record.
fn archive_task(
    writer: &mut ArchiveWriter,
    existing: &TaskSlice,
    task_id: &str,
    iteration: u32,
    outcome: Result<SearchResult, String>,
) -> Result<(), OrchestratorError> {
    let (attempts, done) = match outcome {
        Ok(r) => {
            let done = TaskDone {
                attempts: r.attempts.len(),
                sample_early_stopped: r.sample_early_stopped,
                refine_early_stopped: r.refine_early_stopped,
                refine_skipped: r.refine_skipped,
                no_viable_seeds: r.no_viable_seeds,
                failure: r.interrupted,
            };
            (r.attempts, done)
        }
        Err(message) => (
            Vec::new(),
            TaskDone {
                attempts: 0,
                sample_early_stopped: false,
                refine_early_stopped: false,
                refine_skipped: false,
                no_viable_seeds: false,
                failure: Some(message),
            },
        ),
    };
    let skip = existing.attempts.len();
    for (i, (old, new)) in existing.attempts.iter().zip(&attempts).enumerate() {
        if old != new {
            return Err(OrchestratorError::ResumeMismatch {
                task_id: task_id.to_string(),
                logical_time: i as u64,
            });
        }
    }
    if attempts.len() < skip {
        return Err(OrchestratorError::ResumeMismatch {
            task_id: task_id.to_string(),
            logical_time: attempts.len() as u64,
        });
    }
    for (i, a) in attempts.into_iter().enumerate().skip(skip) {
        writer.append(task_id, iteration, i as u64, Entry::Attempt(a))?;
    }
    writer.append(task_id, iteration, done.attempts as u64, Entry::TaskDone(done))?;
    writer.flush()
}

/// Searches `todo` with up to `config.parallelism` tasks in flight and
/// archives them strictly in `todo` order, so the file does not depend on
/// scheduling.
fn search_tasks(
    todo: &[&Task],
    existing: &BTreeMap<String, TaskSlice>,
    few_shot: &[(Task, Program)],
    config: &RunConfig,
    backends: &Backends,
    writer: &mut ArchiveWriter,
) -> Result<(), OrchestratorError> {
    let params = SamplingParams {
        model_tag: config.model_tag.clone(),
        ..config.generation.clone()
    };
    let next = AtomicUsize::new(0);
    let empty = TaskSlice::default();
    std::thread::scope(|s| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..config.parallelism.min(todo.len()) {
            let tx = tx.clone();
            let (next, params) = (&next, &params);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(task) = todo.get(i) else { break };
                let shot = pick_few_shot(few_shot, task.task_id(), config);
                let outcome = search_one(task, config, backends, params, shot);
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut ready = BTreeMap::new();
        let mut want = 0usize;
        for (i, outcome) in rx {
            ready.insert(i, outcome);
            while let Some(outcome) = ready.remove(&want) {
                let id = todo[want].task_id();
                if let Err(e) = &outcome {
                    log::warn!("task {id} failed: {e}");
                }
                archive_task(
                    writer,
                    existing.get(id).unwrap_or(&empty),
                    id,
                    config.iteration,
                    outcome,
                )?;
                log::info!("task {id} archived ({}/{})", want + 1, todo.len());
                want += 1;
            }
        }
        Ok(())
    })
}

/// Result of [`run_iteration`].
#[derive(Clone, Debug, PartialEq)]
pub struct IterationOutcome {
    pub manifest: IterationManifest,
    /// The iteration had already completed; nothing was run or written.
    pub already_complete: bool,
}

/// Runs (or resumes) the configured iteration with backends built from the
/// config.
pub fn run_iteration(config: &RunConfig) -> Result<IterationOutcome, OrchestratorError> {
    config.validate()?;
    let tasks = load_task_set(&config.tasks.iter().map(|p| config.resolve(p)).collect::<Vec<_>>())?;
    let backends = Backends::from_config(config)?;
    run_iteration_with(config, &tasks, &backends)
}

/// [`run_iteration`] over already loaded tasks and backends. In test-time
/// mode the tasks may carry ground truth; it is never read.
pub fn run_iteration_with(
    config: &RunConfig,
    tasks: &[Task],
    backends: &Backends,
) -> Result<IterationOutcome, OrchestratorError> {
    config.validate()?;
    let iter_dir = config.iteration_dir();
    let manifest_path = iter_dir.join("manifest.json");
    if manifest_path.exists() {
        return Ok(IterationOutcome {
            manifest: IterationManifest::load(&manifest_path)?,
            already_complete: true,
        });
    }
    let archive_path = config.archive_path();
    let records = read_archive(&archive_path)?;
    let state = resume_state(&records, tasks, config.iteration);
    if !state.done.is_empty() || !state.partial.is_empty() {
        log::info!(
            "resuming iteration {}: {} done, {} partial, {} pending",
            config.iteration,
            state.done.len(),
            state.partial.len(),
            state.pending.len()
        );
    }
    let existing = task_slices(&records, Some(config.iteration));
    let todo: Vec<&Task> = tasks
        .iter()
        .filter(|t| existing.get(t.task_id()).is_none_or(|s| s.done.is_none()))
        .collect();
    let few_shot = few_shot_pool(&records, tasks, config);
    let mut writer = ArchiveWriter::open(&archive_path, &records)?;
    search_tasks(&todo, &existing, &few_shot, config, backends, &mut writer)?;
    drop(writer);

    let records = read_archive(&archive_path)?;
    let truth = match config.mode {
        Mode::Train => Some(truth_map(tasks)),
        Mode::TestTime => None,
    };
    let report = build_report(
        &records,
        Some(config.iteration),
        truth.as_ref(),
        &config.vote,
        &*backends.embed,
    )?;
    write_file(&iter_dir.join("report.json"), &report.to_json())?;
    write_file(&iter_dir.join("report.csv"), &report.to_csv())?;

    let slices = if config.dataset.pool_iterations {
        archive::pooled_slices(&records, config.iteration)
    } else {
        task_slices(&records, Some(config.iteration))
    };
    let mut kinds = vec![(DatasetKind::Sampling, config.sampling_policy(), "sampling.jsonl")];
    if config.mode == Mode::Train {
        kinds.push((DatasetKind::Refinement, &config.dataset.refinement, "refinement.jsonl"));
    }
    let mut datasets = Vec::new();
    for (kind, policy, file) in kinds {
        let spec = DatasetSpec {
            kind,
            policy,
            mode: config.mode,
            vote: &config.vote,
            augment_shuffle: config.dataset.augment_shuffle,
            dedup_threshold: Some(config.dataset.dedup_threshold),
            dedup_scope: config.dataset.dedup_scope,
            seed: seed::derive_seed(config.seed, &[DATASET_STREAM, u64::from(config.iteration)]),
            timeout_ms: config.timeout_ms,
        };
        let recs = build_dataset(&slices, tasks, &spec, &*backends.executor, &*backends.embed)?;
        let sha256 = write_dataset(&iter_dir.join(file), &recs)?;
        datasets.push(DatasetDigest {
            kind,
            file: file.to_string(),
            records: recs.len(),
            sha256,
        });
    }

    let this_iter = task_slices(&records, Some(config.iteration));
    let counters: Vec<TaskCounters> = report
        .tasks
        .iter()
        .map(|t| TaskCounters {
            task_id: t.task_id.clone(),
            attempts: t.attempts,
            sample_attempts: t.sample_attempts,
            refine_attempts: t.refine_attempts,
            parse_failures: t.parse_failures,
            perfect_count: t.perfect_count,
            solved_vote: t.sample_refine_solved,
            solved_oracle: t.oracle_solved,
            failure: this_iter
                .get(&t.task_id)
                .and_then(|s| s.done.as_ref())
                .and_then(|d| d.failure.clone()),
        })
        .collect();
    let manifest = IterationManifest {
        iteration: config.iteration,
        mode: config.mode,
        model_tag: config.model_tag.clone(),
        finetune_from: backends
            .models
            .finetune_source(&config.model_tag, config.dataset.finetune_from)
            .to_string(),
        min_p_forwarded: backends.chat.forwards_min_p(),
        config_hash: config.hash(),
        budget: config.budget.clone(),
        rex: config.rex.clone(),
        failed_tasks: counters.iter().filter(|c| c.failure.is_some()).count(),
        tasks: counters,
        datasets,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&manifest_path, &text)?;
    Ok(IterationOutcome {
        manifest,
        already_complete: false,
    })
}

/// Result of a single-task search.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveOutcome {
    pub result: SearchResult,
    pub ranked: Vec<VotePattern>,
    /// Top `n_output` patterns contain the truth; `None` without truth.
    pub solved: Option<bool>,
}

/// Sample&Refine on one task, then a vote.
pub fn solve(task: &Task, config: &RunConfig, backends: &Backends) -> Result<SolveOutcome, OrchestratorError> {
    let params = SamplingParams {
        model_tag: config.model_tag.clone(),
        ..config.generation.clone()
    };
    let result = search_one(task, config, backends, &params, None).map_err(OrchestratorError::Config)?;
    let slice = TaskSlice {
        attempts: result.attempts.clone(),
        done: None,
    };
    let ranked = match vote_slice(&slice, None, &config.vote) {
        Ok(r) => r,
        Err(VoteError::EmptyPool) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let solved = match config.mode {
        Mode::Train => task
            .truth()
            .map(|t| score_task(&ranked, Some(t), config.vote.n_output))
            .transpose()?,
        Mode::TestTime => None,
    };
    Ok(SolveOutcome { result, ranked, solved })
}
