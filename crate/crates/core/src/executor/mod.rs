//! Program execution: the executor trait, the worker wire format and the
//! helpers that turn raw per-grid results into [`CandidateEvaluation`]s.

mod mock;
mod pool;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arc::{CandidateEvaluation, Grid, Outcome, Program, Task};

pub use mock::MockExecutor;
pub use pool::{WorkerPool, WorkerPoolConfig};

pub const DEFAULT_TIMEOUT_MS: u64 = 2000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("worker unavailable: {0}")]
    WorkerUnavailable(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionRequest {
    pub request_id: String,
    pub source: String,
    pub input_grids: Vec<Grid>,
    pub timeout_ms: u64,
}

impl ExecutionRequest {
    pub fn validate(&self) -> Result<(), ExecError> {
        if self.input_grids.is_empty() {
            return Err(ExecError::InvalidRequest("no input grids".into()));
        }
        if self.timeout_ms == 0 {
            return Err(ExecError::InvalidRequest("timeout_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn to_wire(&self) -> WireRequest {
        WireRequest {
            id: self.request_id.clone(),
            source: self.source.clone(),
            grids: self.input_grids.iter().map(Grid::to_raw).collect(),
            timeout_ms: self.timeout_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionResponse {
    pub request_id: String,
    pub results: Vec<Outcome>,
}

/// One request line sent to a sandbox worker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: String,
    pub source: String,
    pub grids: Vec<Vec<Vec<i64>>>,
    pub timeout_ms: u64,
}

/// Per-grid status as reported by a worker. Grids are untrusted here.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum WireResult {
    Ok { grid: Vec<Vec<i64>> },
    Error { message: String },
    Timeout,
}

impl WireResult {
    /// Ok grids that break grid invariants become `InvalidOutput`.
    pub fn into_outcome(self) -> Outcome {
        match self {
            WireResult::Ok { grid } => match Grid::from_raw(grid) {
                Ok(grid) => Outcome::Ok { grid },
                Err(e) => Outcome::InvalidOutput { message: e.to_string() },
            },
            WireResult::Error { message } => Outcome::RuntimeError { message },
            WireResult::Timeout => Outcome::Timeout,
        }
    }
}

/// One response line read back from a sandbox worker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: String,
    pub results: Vec<WireResult>,
}

impl WireResponse {
    /// Checks the reply against its request and converts it.
    pub fn into_response(self, request: &ExecutionRequest) -> Result<ExecutionResponse, ExecError> {
        if self.id != request.request_id {
            return Err(ExecError::ProtocolViolation(format!(
                "reply id {:?} does not match request id {:?}",
                self.id, request.request_id
            )));
        }
        if self.results.len() != request.input_grids.len() {
            return Err(ExecError::ProtocolViolation(format!(
                "{} results for {} grids",
                self.results.len(),
                request.input_grids.len()
            )));
        }
        Ok(ExecutionResponse {
            request_id: self.id,
            results: self.results.into_iter().map(WireResult::into_outcome).collect(),
        })
    }
}

/// Anything that can run a `transform` program over a list of grids.
pub trait Executor: Send + Sync {
    fn name(&self) -> &str;
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionResponse, ExecError>;
}

/// Runs `program` on every train input and every test input in one request.
pub fn evaluate_program(
    executor: &dyn Executor,
    program: &Program,
    task: &Task,
    timeout_ms: u64,
) -> Result<CandidateEvaluation, ExecError> {
    let n_train = task.train().len();
    let mut input_grids: Vec<Grid> = task.train().iter().map(|p| p.input.clone()).collect();
    input_grids.extend(task.test_inputs().iter().cloned());
    let request = ExecutionRequest {
        request_id: format!("{}/{}", task.task_id(), program.id),
        source: program.source.clone(),
        input_grids,
        timeout_ms,
    };
    request.validate()?;
    let response = executor.execute(&request)?;
    if response.results.len() != request.input_grids.len() {
        return Err(ExecError::ProtocolViolation(format!(
            "{} results for {} grids",
            response.results.len(),
            request.input_grids.len()
        )));
    }
    let mut train = response.results;
    let test = train.split_off(n_train);
    CandidateEvaluation::new(program.id, task, train, test).map_err(|e| ExecError::ProtocolViolation(e.to_string()))
}

/// Evaluation used when the executor itself failed for a program.
pub fn failed_evaluation(program: &Program, task: &Task, message: &str) -> CandidateEvaluation {
    let err = || Outcome::RuntimeError {
        message: message.to_string(),
    };
    CandidateEvaluation {
        program_id: program.id,
        train_outcomes: task.train().iter().map(|_| err()).collect(),
        test_outcomes: task.test_inputs().iter().map(|_| err()).collect(),
        train_accuracy: 0.0,
    }
}

/// Evaluates every program exactly once with at most `parallelism` requests
/// in flight. Output order matches input order. Executor failures become
/// all-error evaluations for that program only.
pub fn evaluate_batch(
    executor: &dyn Executor,
    programs: &[Program],
    task: &Task,
    parallelism: usize,
    timeout_ms: u64,
) -> Vec<CandidateEvaluation> {
    let run = |p: &Program| match evaluate_program(executor, p, task, timeout_ms) {
        Ok(e) => e,
        Err(e) => {
            log::warn!("task {} program {}: {e}", task.task_id(), p.id);
            failed_evaluation(p, task, &e.to_string())
        }
    };
    let workers = parallelism.max(1).min(programs.len());
    if workers <= 1 {
        return programs.iter().map(run).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CandidateEvaluation>>> = programs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= programs.len() {
                    break;
                }
                let eval = run(&programs[i]);
                *slots[i].lock().expect("slot lock") = Some(eval);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arc::{Origin, Pair, ProgramId, Provenance};
    use crate::mock::ProgramLibrary;

    fn grid(rows: Vec<Vec<u8>>) -> Grid {
        Grid::new(rows).unwrap()
    }

    fn program(id: u64, source: &str) -> Program {
        Program {
            id: ProgramId(id),
            source: source.to_string(),
            provenance: Provenance::Sampled,
            origin: Origin::default(),
        }
    }

    fn identity_task() -> Task {
        let pairs = vec![
            Pair {
                input: grid(vec![vec![1, 2]]),
                output: grid(vec![vec![1, 2]]),
            },
            Pair {
                input: grid(vec![vec![3], vec![4]]),
                output: grid(vec![vec![3], vec![4]]),
            },
        ];
        Task::new("ident", pairs, vec![grid(vec![vec![5]])], None).unwrap()
    }

    #[test]
    fn wire_ok_grid_failing_invariants_is_invalid_output() {
        let tall = WireResult::Ok {
            grid: vec![vec![0]; 31],
        };
        assert!(matches!(tall.into_outcome(), Outcome::InvalidOutput { .. }));
        let color = WireResult::Ok { grid: vec![vec![10]] };
        assert!(matches!(color.into_outcome(), Outcome::InvalidOutput { .. }));
    }

    #[test]
    fn wire_reply_checks_id_and_length() {
        let req = ExecutionRequest {
            request_id: "a".into(),
            source: "x".into(),
            input_grids: vec![grid(vec![vec![1]])],
            timeout_ms: 10,
        };
        let wrong_id = WireResponse {
            id: "b".into(),
            results: vec![WireResult::Timeout],
        };
        assert!(matches!(
            wrong_id.into_response(&req),
            Err(ExecError::ProtocolViolation(_))
        ));
        let short = WireResponse {
            id: "a".into(),
            results: vec![],
        };
        assert!(matches!(
            short.into_response(&req),
            Err(ExecError::ProtocolViolation(_))
        ));
    }

    #[test]
    fn request_validation() {
        let mut req = ExecutionRequest {
            request_id: "a".into(),
            source: "x".into(),
            input_grids: vec![],
            timeout_ms: 10,
        };
        assert!(req.validate().is_err());
        req.input_grids.push(grid(vec![vec![1]]));
        req.timeout_ms = 0;
        assert!(req.validate().is_err());
    }

    #[test]
    fn identity_program_is_perfect() {
        let lib = ProgramLibrary::standard();
        let exec = MockExecutor::from_library(&lib);
        let ident = &lib.by_name("identity").unwrap().source;
        let eval = evaluate_program(&exec, &program(0, ident), &identity_task(), 100).unwrap();
        assert_eq!(eval.train_accuracy, 1.0);
        assert_eq!(eval.test_outcomes.len(), 1);
    }

    #[test]
    fn raising_program_scores_zero() {
        let lib = ProgramLibrary::standard();
        let exec = MockExecutor::from_library(&lib);
        let src = &lib.by_name("raises").unwrap().source;
        let eval = evaluate_program(&exec, &program(0, src), &identity_task(), 100).unwrap();
        assert_eq!(eval.train_accuracy, 0.0);
        assert!(eval
            .train_outcomes
            .iter()
            .chain(&eval.test_outcomes)
            .all(|o| matches!(o, Outcome::RuntimeError { .. })));
    }

    #[test]
    fn oversized_output_is_invalid() {
        let lib = ProgramLibrary::standard();
        let exec = MockExecutor::from_library(&lib);
        let src = &lib.by_name("too_tall").unwrap().source;
        let eval = evaluate_program(&exec, &program(0, src), &identity_task(), 100).unwrap();
        // Direct invariant check: 31 rows exceeds the 30-row limit.
        assert!(Grid::from_raw(vec![vec![0]; 31]).is_err());
        assert!(eval
            .train_outcomes
            .iter()
            .all(|o| matches!(o, Outcome::InvalidOutput { .. })));
    }

    #[test]
    fn batch_preserves_order_and_isolates_failures() {
        let lib = ProgramLibrary::standard();
        let exec = MockExecutor::from_library(&lib);
        let task = identity_task();
        assert!(evaluate_batch(&exec, &[], &task, 4, 100).is_empty());

        let names = ["identity", "raises", "transpose", "flip_vertical", "identity"];
        let programs: Vec<Program> = (0..10)
            .map(|i| program(i, &lib.by_name(names[i as usize % names.len()]).unwrap().source))
            .collect();
        let batch = evaluate_batch(&exec, &programs, &task, 4, 100);
        let sequential: Vec<_> = programs
            .iter()
            .map(|p| evaluate_program(&exec, p, &task, 100).unwrap())
            .collect();
        assert_eq!(batch, sequential);
        assert_eq!(batch[0].train_accuracy, 1.0);
        assert_eq!(batch[1].train_accuracy, 0.0);
        for (p, e) in programs.iter().zip(&batch) {
            assert_eq!(p.id, e.program_id);
        }
    }

    #[test]
    fn batch_is_order_independent() {
        let lib = ProgramLibrary::standard();
        let exec = MockExecutor::from_library(&lib);
        let task = identity_task();
        let mut programs: Vec<Program> = lib
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| program(i as u64, &e.source))
            .collect();
        let forward = evaluate_batch(&exec, &programs, &task, 3, 100);
        programs.reverse();
        let mut backward = evaluate_batch(&exec, &programs, &task, 3, 100);
        backward.reverse();
        assert_eq!(forward, backward);
    }
}
