//! Pool of sandbox worker processes speaking line-delimited JSON over stdio.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use super::{ExecError, ExecutionRequest, ExecutionResponse, Executor, WireResponse};
use crate::arc::Outcome;

#[derive(Clone, Debug)]
pub struct WorkerPoolConfig {
    /// Program and arguments used to launch one worker.
    pub command: Vec<String>,
    pub workers: usize,
    /// Added to `timeout_ms * grids` before the client gives up on a reply.
    pub slack_ms: u64,
}

impl Default for WorkerPoolConfig {
    fn default() -> Self {
        WorkerPoolConfig {
            command: vec!["python3".into(), "-m".into(), "soar_worker".into()],
            workers: 4,
            slack_ms: 1000,
        }
    }
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Worker {
    fn spawn(command: &[String]) -> Result<Worker, ExecError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| ExecError::WorkerUnavailable("empty worker command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| ExecError::WorkerUnavailable(format!("spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(l).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(Worker {
            child,
            stdin,
            lines: rx,
        })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

enum Exchange {
    Reply(String),
    Deadline,
    Crashed,
}

/// Executor backed by worker subprocesses. At most `workers` requests are in
/// flight; callers block until a worker is free.
pub struct WorkerPool {
    config: WorkerPoolConfig,
    idle: Mutex<Vec<Worker>>,
    freed: Condvar,
}

impl WorkerPool {
    pub fn new(config: WorkerPoolConfig) -> Result<Self, ExecError> {
        if config.workers == 0 {
            return Err(ExecError::WorkerUnavailable("pool needs at least one worker".into()));
        }
        let mut idle = Vec::with_capacity(config.workers);
        for _ in 0..config.workers {
            idle.push(Worker::spawn(&config.command)?);
        }
        Ok(WorkerPool {
            config,
            idle: Mutex::new(idle),
            freed: Condvar::new(),
        })
    }

    fn acquire(&self) -> Worker {
        let mut idle = self.idle.lock().expect("pool lock");
        loop {
            if let Some(w) = idle.pop() {
                return w;
            }
            idle = self.freed.wait(idle).expect("pool lock");
        }
    }

    fn release(&self, worker: Worker) {
        self.idle.lock().expect("pool lock").push(worker);
        self.freed.notify_one();
    }

    fn exchange(worker: &mut Worker, line: &str, deadline: Duration) -> Exchange {
        // Drop anything a previous request left behind.
        while worker.lines.try_recv().is_ok() {}
        let written = worker
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| worker.stdin.write_all(b"\n"))
            .and_then(|_| worker.stdin.flush());
        if written.is_err() {
            return Exchange::Crashed;
        }
        match worker.lines.recv_timeout(deadline) {
            Ok(reply) => Exchange::Reply(reply),
            Err(RecvTimeoutError::Timeout) => Exchange::Deadline,
            Err(RecvTimeoutError::Disconnected) => Exchange::Crashed,
        }
    }

    /// Replaces a dead or wedged worker. The slot is returned to the pool even
    /// if the respawn fails so that later requests can retry the spawn.
    fn replace(&self, worker: Worker) -> Result<Worker, ExecError> {
        worker.kill();
        Worker::spawn(&self.config.command)
    }

    fn all(request: &ExecutionRequest, outcome: Outcome) -> ExecutionResponse {
        ExecutionResponse {
            request_id: request.request_id.clone(),
            results: request.input_grids.iter().map(|_| outcome.clone()).collect(),
        }
    }
}

impl Executor for WorkerPool {
    fn name(&self) -> &str {
        "subprocess"
    }

    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionResponse, ExecError> {
        request.validate()?;
        let line = serde_json::to_string(&request.to_wire()).map_err(|e| ExecError::InvalidRequest(e.to_string()))?;
        let grids = request.input_grids.len() as u64;
        let deadline = Duration::from_millis(request.timeout_ms.saturating_mul(grids) + self.config.slack_ms);

        let mut worker = self.acquire();
        let mut crashes = 0;
        loop {
            match Self::exchange(&mut worker, &line, deadline) {
                Exchange::Reply(reply) => {
                    let parsed = serde_json::from_str::<WireResponse>(&reply)
                        .map_err(|e| ExecError::ProtocolViolation(format!("{e}: {reply}")))
                        .and_then(|r| r.into_response(request));
                    match parsed {
                        Ok(resp) => {
                            self.release(worker);
                            return Ok(resp);
                        }
                        Err(e) => {
                            // Worker state is unknown after a bad reply.
                            match self.replace(worker) {
                                Ok(w) => self.release(w),
                                Err(spawn) => log::error!("respawn failed: {spawn}"),
                            }
                            return Err(e);
                        }
                    }
                }
                Exchange::Deadline => {
                    log::warn!("request {} exceeded {:?}", request.request_id, deadline);
                    let fresh = self.replace(worker)?;
                    self.release(fresh);
                    return Ok(Self::all(request, Outcome::Timeout));
                }
                Exchange::Crashed => {
                    crashes += 1;
                    worker = self.replace(worker)?;
                    if crashes > 1 {
                        self.release(worker);
                        return Ok(Self::all(
                            request,
                            Outcome::RuntimeError {
                                message: "worker crash".into(),
                            },
                        ));
                    }
                }
            }
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        if let Ok(mut idle) = self.idle.lock() {
            for w in idle.drain(..) {
                w.kill();
            }
        }
    }
}
