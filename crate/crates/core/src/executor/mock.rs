use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use super::{ExecError, ExecutionRequest, ExecutionResponse, Executor, WireResult};
use crate::arc::Outcome;
use crate::mock::{NativeTransform, ProgramLibrary};

/// In-process executor mapping exact source text to a native transform.
#[derive(Clone, Default)]
pub struct MockExecutor {
    table: HashMap<String, NativeTransform>,
}

impl MockExecutor {
    pub fn new(table: HashMap<String, NativeTransform>) -> Self {
        MockExecutor { table }
    }

    pub fn from_library(lib: &ProgramLibrary) -> Self {
        let table = lib
            .entries()
            .iter()
            .map(|e| (e.source.clone(), e.transform.clone()))
            .collect();
        MockExecutor { table }
    }

    pub fn insert(&mut self, source: impl Into<String>, transform: NativeTransform) {
        self.table.insert(source.into(), transform);
    }
}

impl Executor for MockExecutor {
    fn name(&self) -> &str {
        "mock"
    }

    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionResponse, ExecError> {
        request.validate()?;
        let results = match self.table.get(&request.source) {
            None => request
                .input_grids
                .iter()
                .map(|_| Outcome::RuntimeError {
                    message: "unknown mock program".into(),
                })
                .collect(),
            Some(f) => request
                .input_grids
                .iter()
                .map(|g| {
                    let wire = match catch_unwind(AssertUnwindSafe(|| f(g))) {
                        Ok(Ok(grid)) => WireResult::Ok { grid },
                        Ok(Err(message)) => WireResult::Error { message },
                        Err(_) => WireResult::Error {
                            message: "native transform panicked".into(),
                        },
                    };
                    wire.into_outcome()
                })
                .collect(),
        };
        Ok(ExecutionResponse {
            request_id: request.request_id.clone(),
            results,
        })
    }
}
