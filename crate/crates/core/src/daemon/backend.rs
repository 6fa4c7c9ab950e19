//! Sources of profiling snapshots: replaying a recorded trace, or running a
//! collector subprocess once per batch size.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::model::ProfileSnapshot;
use crate::trace::{read_trace, Trace, TraceError, TraceRecord};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("cannot read trace {path}: {source}")]
    Trace {
        path: String,
        #[source]
        source: TraceError,
    },
    #[error("cannot open {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid collector command: {0}")]
    BadCommand(String),
    #[error("collector failed for batch size {batch_size} (exit {status}): {stderr}")]
    CollectorFailed {
        batch_size: u32,
        status: String,
        stderr: String,
    },
    #[error("collector output for batch size {batch_size} is unreadable: {source}")]
    CollectorOutput {
        batch_size: u32,
        #[source]
        source: TraceError,
    },
    #[error("collector did not report batch size {0}")]
    MissingBatch(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Measurement {
    Snapshot(ProfileSnapshot),
    OutOfMemory,
    /// The backend has no data for this batch size (replay only).
    Unavailable,
}

/// One profiling pass. Backends may cache state for the duration of a run.
pub trait ProfilingRun {
    /// Batch sizes already known to exhaust device memory.
    fn known_ooms(&self) -> BTreeSet<u32>;
    /// Batch size to use when the source file does not name one.
    fn fallback_batch(&self) -> Option<u32>;
    fn measure(&mut self, batch_size: u32) -> Result<Measurement, BackendError>;
}

pub trait ProfilerBackend: Send + Sync {
    fn start(&self) -> Result<Box<dyn ProfilingRun + '_>, BackendError>;
    fn describe(&self) -> String;
}

/// Serves snapshots from a trace file, re-reading it on every run.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    pub trace_path: PathBuf,
    /// Artificial latency per measured batch, for exercising slow runs.
    pub delay: Duration,
}

impl ReplayBackend {
    pub fn new(trace_path: impl Into<PathBuf>) -> Self {
        ReplayBackend {
            trace_path: trace_path.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

pub fn load_trace(path: &Path) -> Result<Trace, BackendError> {
    let file = File::open(path).map_err(|e| BackendError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    read_trace(BufReader::new(file)).map_err(|source| BackendError::Trace {
        path: path.display().to_string(),
        source,
    })
}

pub struct ReplayRun {
    trace: Trace,
    delay: Duration,
}

impl ReplayRun {
    pub fn new(trace: Trace) -> Self {
        ReplayRun {
            trace,
            delay: Duration::ZERO,
        }
    }
}

impl ProfilingRun for ReplayRun {
    fn known_ooms(&self) -> BTreeSet<u32> {
        self.trace.ooms.iter().copied().collect()
    }

    fn fallback_batch(&self) -> Option<u32> {
        self.trace.snapshots.first().map(|s| s.iteration.batch_size)
    }

    fn measure(&mut self, batch_size: u32) -> Result<Measurement, BackendError> {
        if !self.delay.is_zero() {
            thread::sleep(self.delay);
        }
        // Exact matches only; interpolation is the predictor's job.
        if let Some(snapshot) = self.trace.snapshot(batch_size) {
            return Ok(Measurement::Snapshot(snapshot.clone()));
        }
        if self.trace.ooms.contains(&batch_size) {
            return Ok(Measurement::OutOfMemory);
        }
        Ok(Measurement::Unavailable)
    }
}

impl ProfilerBackend for ReplayBackend {
    fn start(&self) -> Result<Box<dyn ProfilingRun + '_>, BackendError> {
        let trace = load_trace(&self.trace_path)?;
        Ok(Box::new(ReplayRun {
            trace,
            delay: self.delay,
        }))
    }

    fn describe(&self) -> String {
        format!("replay {}", self.trace_path.display())
    }
}

/// Runs `<command> --entry FILE --batch N --out -` for each batch size and
/// reads the trace it prints.
#[derive(Debug, Clone)]
pub struct SubprocessBackend {
    pub command: Vec<String>,
    pub working_dir: PathBuf,
    pub entry_file: PathBuf,
    pub capacity_bytes: Option<u64>,
}

impl SubprocessBackend {
    pub fn from_command_line(
        command_line: &str,
        working_dir: impl Into<PathBuf>,
        entry_file: impl Into<PathBuf>,
        capacity_bytes: Option<u64>,
    ) -> Result<Self, BackendError> {
        let command = shlex::split(command_line)
            .filter(|parts| !parts.is_empty())
            .ok_or_else(|| BackendError::BadCommand(command_line.to_owned()))?;
        Ok(SubprocessBackend {
            command,
            working_dir: working_dir.into(),
            entry_file: entry_file.into(),
            capacity_bytes,
        })
    }
}

fn reports_oom(stdout: &[u8], batch_size: u32) -> bool {
    String::from_utf8_lossy(stdout).lines().any(|line| {
        matches!(
            serde_json::from_str::<TraceRecord>(line),
            Ok(TraceRecord::Oom { batch_size: b }) if b == batch_size
        )
    })
}

struct SubprocessRun<'a> {
    backend: &'a SubprocessBackend,
    ooms: BTreeSet<u32>,
}

impl ProfilingRun for SubprocessRun<'_> {
    fn known_ooms(&self) -> BTreeSet<u32> {
        self.ooms.clone()
    }

    fn fallback_batch(&self) -> Option<u32> {
        None
    }

    fn measure(&mut self, batch_size: u32) -> Result<Measurement, BackendError> {
        let backend = self.backend;
        let mut cmd = Command::new(&backend.command[0]);
        cmd.args(&backend.command[1..])
            .arg("--entry")
            .arg(&backend.entry_file)
            .arg("--batch")
            .arg(batch_size.to_string())
            .arg("--out")
            .arg("-")
            .current_dir(&backend.working_dir);
        if let Some(capacity) = backend.capacity_bytes {
            cmd.arg("--capacity").arg(capacity.to_string());
        }
        log::debug!("running collector {:?}", cmd);
        let output = cmd.output().map_err(|e| BackendError::Io {
            path: backend.command[0].clone(),
            message: e.to_string(),
        })?;
        if !output.status.success() {
            return Err(BackendError::CollectorFailed {
                batch_size,
                status: output
                    .status
                    .code()
                    .map_or_else(|| "signal".to_owned(), |c| c.to_string()),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_owned(),
            });
        }
        let trace = read_trace(&output.stdout[..])
            .map_err(|source| BackendError::CollectorOutput { batch_size, source });
        // A collector that only hit OOM may emit just meta + oom.
        let trace = match trace {
            Err(BackendError::CollectorOutput {
                source: TraceError::NoIteration,
                ..
            }) if reports_oom(&output.stdout, batch_size) => {
                self.ooms.insert(batch_size);
                return Ok(Measurement::OutOfMemory);
            }
            other => other?,
        };
        if trace.ooms.contains(&batch_size) {
            self.ooms.insert(batch_size);
            return Ok(Measurement::OutOfMemory);
        }
        trace
            .snapshot(batch_size)
            .cloned()
            .map(Measurement::Snapshot)
            .ok_or(BackendError::MissingBatch(batch_size))
    }
}

impl ProfilerBackend for SubprocessBackend {
    fn start(&self) -> Result<Box<dyn ProfilingRun + '_>, BackendError> {
        Ok(Box::new(SubprocessRun {
            backend: self,
            ooms: BTreeSet::new(),
        }))
    }

    fn describe(&self) -> String {
        format!("collector {}", self.command.join(" "))
    }
}
