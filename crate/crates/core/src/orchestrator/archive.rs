//! Append-only run archive. One JSON document per line, each wrapped with
//! the sha256 of its exact body bytes:
//!
//! ```text
//! {"sha256":"<64 hex>","record":{...}}
//! ```
//!
//! Record ids increase strictly through the file. A task's attempts are
//! followed by a `task_done` record, so a crash leaves at most one task
//! partially written.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::OrchestratorError;
use crate::arc::{CandidateEvaluation, Program};
use crate::search::{Attempt, Phase, SearchResult};

const PREFIX: &str = "{\"sha256\":\"";
const MIDDLE: &str = "\",\"record\":";

/// How a task's search ended.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDone {
    pub attempts: usize,
    pub sample_early_stopped: bool,
    pub refine_early_stopped: bool,
    pub refine_skipped: bool,
    pub no_viable_seeds: bool,
    /// Backend or search error that cut the task short.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Entry {
    Attempt(Attempt),
    TaskDone(TaskDone),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub record_id: u64,
    pub task_id: String,
    pub iteration: u32,
    /// Position within the task's search for attempts; the attempt count
    /// for `task_done`. Stands in for wall-clock time so archives replay
    /// byte for byte.
    pub logical_time: u64,
    #[serde(flatten)]
    pub entry: Entry,
}

impl ArchiveRecord {
    pub fn attempt(&self) -> Option<&Attempt> {
        match &self.entry {
            Entry::Attempt(a) => Some(a),
            Entry::TaskDone(_) => None,
        }
    }

    pub fn task_done(&self) -> Option<&TaskDone> {
        match &self.entry {
            Entry::TaskDone(d) => Some(d),
            Entry::Attempt(_) => None,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> OrchestratorError {
    OrchestratorError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn encode_line(record: &ArchiveRecord) -> String {
    let body = serde_json::to_string(record).expect("archive record serializes");
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    format!("{PREFIX}{digest}{MIDDLE}{body}}}\n")
}

fn decode_line(line: &str) -> Result<ArchiveRecord, String> {
    let rest = line.strip_prefix(PREFIX).ok_or("missing checksum header")?;
    if rest.len() < 64 + MIDDLE.len() {
        return Err("line too short".into());
    }
    let (digest, rest) = rest.split_at(64);
    let body = rest
        .strip_prefix(MIDDLE)
        .and_then(|r| r.strip_suffix('}'))
        .ok_or("malformed envelope")?;
    if hex::encode(Sha256::digest(body.as_bytes())) != digest {
        return Err("checksum mismatch".into());
    }
    serde_json::from_str(body).map_err(|e| format!("bad record: {e}"))
}

/// Reads and verifies every record. Fails on the first bad line, a missing
/// final newline, or a record id that does not increase.
pub fn read_archive(path: &Path) -> Result<Vec<ArchiveRecord>, OrchestratorError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let corrupt = |offset: usize, reason: String| OrchestratorError::CorruptArchive {
        path: path.display().to_string(),
        offset: offset as u64,
        reason,
    };
    let mut records: Vec<ArchiveRecord> = Vec::new();
    let mut offset = 0usize;
    while offset < bytes.len() {
        let Some(len) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(corrupt(offset, "truncated final line".into()));
        };
        let line = std::str::from_utf8(&bytes[offset..offset + len]).map_err(|e| corrupt(offset, e.to_string()))?;
        let record = decode_line(line).map_err(|r| corrupt(offset, r))?;
        if let Some(prev) = records.last() {
            if record.record_id <= prev.record_id {
                return Err(corrupt(
                    offset,
                    format!("record id {} after {}", record.record_id, prev.record_id),
                ));
            }
        }
        records.push(record);
        offset += len + 1;
    }
    Ok(records)
}

/// The single writer of an archive file.
pub struct ArchiveWriter {
    path: PathBuf,
    out: BufWriter<File>,
    next_id: u64,
}

impl ArchiveWriter {
    /// Opens for appending after `existing`, the verified current contents.
    pub fn open(path: &Path, existing: &[ArchiveRecord]) -> Result<Self, OrchestratorError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(ArchiveWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            next_id: existing.last().map_or(0, |r| r.record_id + 1),
        })
    }

    pub fn append(
        &mut self,
        task_id: &str,
        iteration: u32,
        logical_time: u64,
        entry: Entry,
    ) -> Result<u64, OrchestratorError> {
        let record = ArchiveRecord {
            record_id: self.next_id,
            task_id: task_id.to_string(),
            iteration,
            logical_time,
            entry,
        };
        self.out
            .write_all(encode_line(&record).as_bytes())
            .map_err(|e| io_err(&self.path, e))?;
        self.next_id += 1;
        Ok(record.record_id)
    }

    /// Pushes buffered lines to the OS. Called after every finished task.
    pub fn flush(&mut self) -> Result<(), OrchestratorError> {
        self.out.flush().map_err(|e| io_err(&self.path, e))
    }
}

/// Archive contents for one task in one iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskSlice {
    pub attempts: Vec<Attempt>,
    pub done: Option<TaskDone>,
}

impl TaskSlice {
    pub fn candidates(&self) -> impl Iterator<Item = (&Program, &CandidateEvaluation)> {
        self.attempts.iter().filter_map(Attempt::candidate)
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.attempts.iter().filter(|a| a.phase == phase).count()
    }

    /// Rebuilds the search result of a finished task.
    pub fn to_search_result(&self, task_id: &str) -> Option<SearchResult> {
        let d = self.done.as_ref()?;
        Some(SearchResult {
            task_id: task_id.to_string(),
            attempts: self.attempts.clone(),
            sample_early_stopped: d.sample_early_stopped,
            refine_early_stopped: d.refine_early_stopped,
            refine_skipped: d.refine_skipped,
            no_viable_seeds: d.no_viable_seeds,
            interrupted: d.failure.clone(),
        })
    }
}

/// Groups records by task for one iteration, or for all when `None`.
/// Attempts of several iterations are concatenated in archive order.
pub fn task_slices(records: &[ArchiveRecord], iteration: Option<u32>) -> BTreeMap<String, TaskSlice> {
    let mut out: BTreeMap<String, TaskSlice> = BTreeMap::new();
    for r in records.iter().filter(|r| iteration.is_none_or(|i| r.iteration == i)) {
        let slice = out.entry(r.task_id.clone()).or_default();
        match &r.entry {
            Entry::Attempt(a) => slice.attempts.push(a.clone()),
            Entry::TaskDone(d) => slice.done = Some(d.clone()),
        }
    }
    out
}

/// Attempts from every iteration up to and including `iteration`.
pub fn pooled_slices(records: &[ArchiveRecord], iteration: u32) -> BTreeMap<String, TaskSlice> {
    let upto: Vec<ArchiveRecord> = records.iter().filter(|r| r.iteration <= iteration).cloned().collect();
    task_slices(&upto, None)
}

/// Digest of the whole file, for manifests.
pub fn file_digest(path: &Path) -> Result<String, OrchestratorError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
