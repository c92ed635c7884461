//! Grids, tasks, programs and evaluations.
//!
//! Everything here is an immutable value. Grids are validated on construction
//! so downstream code never has to re-check the 1..=30 / 0..=9 invariants.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const MAX_GRID_SIDE: usize = 30;
pub const MAX_COLOR: i64 = 9;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArcError {
    #[error("malformed task document: {0}")]
    MalformedDocument(String),
    #[error("grid invariant violated: {0}")]
    GridInvariantViolation(String),
    #[error("outcome count {got} does not match {expected} train pairs")]
    LengthMismatch { expected: usize, got: usize },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// A rectangular matrix of color codes in `0..=9`, at most 30x30.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<i64>>", into = "Vec<Vec<i64>>")]
pub struct Grid {
    rows: Vec<Vec<u8>>,
}

impl Grid {
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self, ArcError> {
        let raw = rows
            .into_iter()
            .map(|r| r.into_iter().map(i64::from).collect())
            .collect();
        Self::from_raw(raw)
    }

    /// Validates an untrusted nested integer list (worker output, JSON input).
    pub fn from_raw(raw: Vec<Vec<i64>>) -> Result<Self, ArcError> {
        let h = raw.len();
        if h == 0 || h > MAX_GRID_SIDE {
            return Err(ArcError::GridInvariantViolation(format!(
                "height {h} outside 1..={MAX_GRID_SIDE}"
            )));
        }
        let w = raw[0].len();
        if w == 0 || w > MAX_GRID_SIDE {
            return Err(ArcError::GridInvariantViolation(format!(
                "width {w} outside 1..={MAX_GRID_SIDE}"
            )));
        }
        let mut rows = Vec::with_capacity(h);
        for (i, row) in raw.into_iter().enumerate() {
            if row.len() != w {
                return Err(ArcError::GridInvariantViolation(format!(
                    "ragged rows: row {i} has length {} but row 0 has {w}",
                    row.len()
                )));
            }
            let mut cells = Vec::with_capacity(w);
            for v in row {
                if !(0..=MAX_COLOR).contains(&v) {
                    return Err(ArcError::GridInvariantViolation(format!(
                        "cell value {v} outside 0..={MAX_COLOR}"
                    )));
                }
                cells.push(v as u8);
            }
            rows.push(cells);
        }
        Ok(Grid { rows })
    }

    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.rows[r][c]
    }

    pub fn to_raw(&self) -> Vec<Vec<i64>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&v| i64::from(v)).collect())
            .collect()
    }

    /// Compact nested-list form, e.g. `[[1,2],[3,4]]`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_raw()).expect("grid serializes")
    }
}

impl TryFrom<Vec<Vec<i64>>> for Grid {
    type Error = ArcError;
    fn try_from(raw: Vec<Vec<i64>>) -> Result<Self, Self::Error> {
        Grid::from_raw(raw)
    }
}

impl From<Grid> for Vec<Vec<i64>> {
    fn from(g: Grid) -> Self {
        g.to_raw()
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid{}", self.to_json())
    }
}

/// Renders a grid the way prompts show it: `[[a b]\n [c d]]`.
pub fn render_grid(g: &Grid) -> String {
    let mut out = String::from("[");
    for (i, row) in g.rows.iter().enumerate() {
        if i > 0 {
            out.push_str("\n ");
        }
        out.push('[');
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push(']');
    }
    out.push(']');
    out
}

/// Exact match: identical dimensions and cells.
pub fn grid_equal(a: &Grid, b: &Grid) -> bool {
    a == b
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub input: Grid,
    pub output: Grid,
}

/// Ground-truth test outputs behind a read counter.
///
/// Every read goes through [`Task::truth`], which bumps a counter shared by
/// all clones of the task. Test-time runs assert the counter stays at zero.
#[derive(Clone)]
struct Truth {
    grids: Vec<Grid>,
    reads: Arc<AtomicU64>,
}

/// An ARC task: demonstration pairs, test inputs and optional hidden outputs.
#[derive(Clone)]
pub struct Task {
    task_id: String,
    train: Vec<Pair>,
    test_inputs: Vec<Grid>,
    truth: Option<Truth>,
}

impl Task {
    pub fn new(
        task_id: impl Into<String>,
        train: Vec<Pair>,
        test_inputs: Vec<Grid>,
        test_outputs: Option<Vec<Grid>>,
    ) -> Result<Self, ArcError> {
        let task_id = task_id.into();
        if train.is_empty() {
            return Err(ArcError::MalformedDocument(format!("task {task_id}: no train pairs")));
        }
        if test_inputs.is_empty() {
            return Err(ArcError::MalformedDocument(format!("task {task_id}: no test inputs")));
        }
        if let Some(outs) = &test_outputs {
            if outs.len() != test_inputs.len() {
                return Err(ArcError::MalformedDocument(format!(
                    "task {task_id}: {} test outputs for {} test inputs",
                    outs.len(),
                    test_inputs.len()
                )));
            }
        }
        if !(2..=10).contains(&train.len()) {
            log::warn!(
                "task {task_id}: {} train pairs (ARC tasks usually have 2-10)",
                train.len()
            );
        }
        Ok(Task {
            task_id,
            train,
            test_inputs,
            truth: test_outputs.map(|grids| Truth {
                grids,
                reads: Arc::new(AtomicU64::new(0)),
            }),
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn train(&self) -> &[Pair] {
        &self.train
    }

    pub fn test_inputs(&self) -> &[Grid] {
        &self.test_inputs
    }

    pub fn has_truth(&self) -> bool {
        self.truth.is_some()
    }

    /// Ground-truth test outputs. Counted; see [`Task::truth_reads`].
    pub fn truth(&self) -> Option<&[Grid]> {
        self.truth.as_ref().map(|t| {
            t.reads.fetch_add(1, Ordering::Relaxed);
            t.grids.as_slice()
        })
    }

    /// Number of ground-truth reads made through this task or any clone.
    pub fn truth_reads(&self) -> u64 {
        self.truth.as_ref().map_or(0, |t| t.reads.load(Ordering::Relaxed))
    }

    /// Copy of this task without ground truth.
    pub fn without_truth(&self) -> Task {
        Task {
            truth: None,
            ..self.clone()
        }
    }

    /// Same task with train pairs reordered by `order` (a permutation).
    pub fn with_train_order(&self, order: &[usize]) -> Task {
        Task {
            train: order.iter().map(|&i| self.train[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Serializes to the public ARC document format. Reading truth here is
    /// not counted: it is a persistence path, not a scoring path.
    pub fn to_document(&self) -> Value {
        let train: Vec<Value> = self
            .train
            .iter()
            .map(|p| serde_json::json!({"input": p.input, "output": p.output}))
            .collect();
        let test: Vec<Value> = self
            .test_inputs
            .iter()
            .enumerate()
            .map(|(i, g)| match &self.truth {
                Some(t) => serde_json::json!({"input": g, "output": t.grids[i]}),
                None => serde_json::json!({"input": g}),
            })
            .collect();
        serde_json::json!({"train": train, "test": test})
    }
}

impl PartialEq for Task {
    fn eq(&self, other: &Self) -> bool {
        self.task_id == other.task_id
            && self.train == other.train
            && self.test_inputs == other.test_inputs
            && self.truth.as_ref().map(|t| &t.grids) == other.truth.as_ref().map(|t| &t.grids)
    }
}

impl fmt::Debug for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Task")
            .field("task_id", &self.task_id)
            .field("train", &self.train.len())
            .field("test", &self.test_inputs.len())
            .field("has_truth", &self.truth.is_some())
            .finish()
    }
}

fn grid_from_value(v: &Value, what: &str) -> Result<Grid, ArcError> {
    let rows = v
        .as_array()
        .ok_or_else(|| ArcError::MalformedDocument(format!("{what}: grid is not an array")))?;
    let mut raw = Vec::with_capacity(rows.len());
    for row in rows {
        let cells = row
            .as_array()
            .ok_or_else(|| ArcError::MalformedDocument(format!("{what}: row is not an array")))?;
        let mut r = Vec::with_capacity(cells.len());
        for c in cells {
            r.push(
                c.as_i64()
                    .ok_or_else(|| ArcError::MalformedDocument(format!("{what}: cell {c} is not an integer")))?,
            );
        }
        raw.push(r);
    }
    Grid::from_raw(raw)
}

/// Parses one task object `{"train": [...], "test": [...]}`.
pub fn parse_task_value(task_id: &str, doc: &Value) -> Result<Task, ArcError> {
    let obj = doc
        .as_object()
        .ok_or_else(|| ArcError::MalformedDocument("task is not an object".into()))?;
    let records = |key: &str| -> Result<&Vec<Value>, ArcError> {
        obj.get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| ArcError::MalformedDocument(format!("missing `{key}` array")))
    };
    let mut train = Vec::new();
    for (i, rec) in records("train")?.iter().enumerate() {
        let input = rec
            .get("input")
            .ok_or_else(|| ArcError::MalformedDocument(format!("train[{i}] has no input")))?;
        let output = rec
            .get("output")
            .ok_or_else(|| ArcError::MalformedDocument(format!("train[{i}] has no output")))?;
        train.push(Pair {
            input: grid_from_value(input, &format!("train[{i}].input"))?,
            output: grid_from_value(output, &format!("train[{i}].output"))?,
        });
    }
    let mut test_inputs = Vec::new();
    let mut test_outputs = Vec::new();
    for (i, rec) in records("test")?.iter().enumerate() {
        let input = rec
            .get("input")
            .ok_or_else(|| ArcError::MalformedDocument(format!("test[{i}] has no input")))?;
        test_inputs.push(grid_from_value(input, &format!("test[{i}].input"))?);
        if let Some(out) = rec.get("output") {
            test_outputs.push(grid_from_value(out, &format!("test[{i}].output"))?);
        }
    }
    let test_outputs = if test_outputs.is_empty() {
        None
    } else {
        Some(test_outputs)
    };
    Task::new(task_id, train, test_inputs, test_outputs)
}

/// Parses a task document given as text.
pub fn parse_task(task_id: &str, document: &str) -> Result<Task, ArcError> {
    let doc: Value = serde_json::from_str(document).map_err(|e| ArcError::MalformedDocument(e.to_string()))?;
    parse_task_value(task_id, &doc)
}

fn io_err(path: &Path, e: std::io::Error) -> ArcError {
    ArcError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Loads tasks from a directory of `<id>.json` files, a single task file, or
/// a single file holding an object of `{id: task}`. Output is sorted by id.
pub fn load_tasks(path: &Path) -> Result<Vec<Task>, ArcError> {
    let mut tasks = Vec::new();
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for file in files {
            tasks.extend(load_task_file(&file)?);
        }
    } else {
        tasks = load_task_file(path)?;
    }
    tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok(tasks)
}

fn load_task_file(path: &Path) -> Result<Vec<Task>, ArcError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| ArcError::MalformedDocument(format!("{}: {e}", path.display())))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match doc.as_object() {
        Some(obj) if obj.contains_key("train") => Ok(vec![parse_task_value(&stem, &doc)?]),
        Some(obj) => obj.iter().map(|(id, v)| parse_task_value(id, v)).collect(),
        None => Err(ArcError::MalformedDocument(format!(
            "{}: top level is not an object",
            path.display()
        ))),
    }
}

/// Result of running a program on one input grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Ok { grid: Grid },
    RuntimeError { message: String },
    Timeout,
    InvalidOutput { message: String },
}

impl Outcome {
    pub fn ok_grid(&self) -> Option<&Grid> {
        match self {
            Outcome::Ok { grid } => Some(grid),
            _ => None,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Outcome::Ok { .. })
    }

    /// RuntimeError or Timeout: the failures that disqualify REx seeds.
    pub fn is_execution_error(&self) -> bool {
        matches!(self, Outcome::RuntimeError { .. } | Outcome::Timeout)
    }
}

/// Fraction of train pairs whose outcome is `Ok` and exactly equals the target.
pub fn compute_train_accuracy(task: &Task, outcomes: &[Outcome]) -> Result<f64, ArcError> {
    if outcomes.len() != task.train.len() {
        return Err(ArcError::LengthMismatch {
            expected: task.train.len(),
            got: outcomes.len(),
        });
    }
    let correct = count_train_correct(task, outcomes);
    Ok(correct as f64 / task.train.len() as f64)
}

fn count_train_correct(task: &Task, outcomes: &[Outcome]) -> usize {
    task.train
        .iter()
        .zip(outcomes)
        .filter(|(pair, o)| o.ok_grid().is_some_and(|g| grid_equal(g, &pair.output)))
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProgramId(pub u64);

impl fmt::Display for ProgramId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Sampled,
    Refined { parent: ProgramId },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub iteration: u32,
    pub island: Option<u32>,
    pub model_tag: String,
    pub seed: u64,
}

/// A candidate `transform` program. Ids are unique per task across iterations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub id: ProgramId,
    pub source: String,
    pub provenance: Provenance,
    pub origin: Origin,
}

impl Program {
    pub fn parent(&self) -> Option<ProgramId> {
        match self.provenance {
            Provenance::Sampled => None,
            Provenance::Refined { parent } => Some(parent),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvaluation {
    pub program_id: ProgramId,
    pub train_outcomes: Vec<Outcome>,
    pub test_outcomes: Vec<Outcome>,
    pub train_accuracy: f64,
}

impl CandidateEvaluation {
    pub fn new(
        program_id: ProgramId,
        task: &Task,
        train_outcomes: Vec<Outcome>,
        test_outcomes: Vec<Outcome>,
    ) -> Result<Self, ArcError> {
        if test_outcomes.len() != task.test_inputs.len() {
            return Err(ArcError::LengthMismatch {
                expected: task.test_inputs.len(),
                got: test_outcomes.len(),
            });
        }
        let train_accuracy = compute_train_accuracy(task, &train_outcomes)?;
        Ok(CandidateEvaluation {
            program_id,
            train_outcomes,
            test_outcomes,
            train_accuracy,
        })
    }

    pub fn is_train_perfect(&self) -> bool {
        self.train_accuracy >= 1.0
    }

    pub fn has_train_error(&self) -> bool {
        self.train_outcomes.iter().any(Outcome::is_execution_error)
    }

    /// All test outputs, when every test outcome is `Ok`.
    pub fn test_grids(&self) -> Option<Vec<&Grid>> {
        self.test_outcomes.iter().map(Outcome::ok_grid).collect()
    }

    /// Number of test outputs matching `truth` exactly.
    pub fn test_matches(&self, truth: &[Grid]) -> usize {
        self.test_outcomes
            .iter()
            .zip(truth)
            .filter(|(o, t)| o.ok_grid().is_some_and(|g| grid_equal(g, t)))
            .count()
    }

    pub fn solves(&self, truth: &[Grid]) -> bool {
        truth.len() == self.test_outcomes.len() && self.test_matches(truth) == truth.len()
    }
}
