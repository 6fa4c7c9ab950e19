//! Measurement data model shared by the trace reader, the breakdown builder
//! and the predictor.
//!
//! Times are milliseconds (`f64`), memory is bytes (`u64`). Stacks are stored
//! outermost frame first.

use std::fmt;

use serde::{Deserialize, Serialize};

/// One frame of a captured call stack.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StackFrame {
    #[serde(rename = "file")]
    pub file_path: String,
    #[serde(rename = "line")]
    pub line_number: u32,
}

impl StackFrame {
    pub fn new(file_path: impl Into<String>, line_number: u32) -> Self {
        StackFrame {
            file_path: file_path.into(),
            line_number,
        }
    }
}

impl fmt::Display for StackFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file_path, self.line_number)
    }
}

/// Combined forward and backward measurement of one intercepted operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationMeasurement {
    pub name: String,
    pub run_time_ms: f64,
    pub activation_bytes: u64,
    pub stack: Vec<StackFrame>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightMeasurement {
    pub name: String,
    pub bytes: u64,
    pub stack: Vec<StackFrame>,
}

/// Whole-iteration measurements taken at one batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub batch_size: u32,
    pub iterations_timed: u32,
    pub total_time_ms: f64,
    pub peak_memory_bytes: u64,
}

impl IterationMetrics {
    pub fn per_iteration_ms(&self) -> f64 {
        self.total_time_ms / f64::from(self.iterations_timed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub memory_capacity_bytes: u64,
}

/// One complete profiling result at a single batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSnapshot {
    pub iteration: IterationMetrics,
    pub operations: Vec<OperationMeasurement>,
    pub weights: Vec<WeightMeasurement>,
    pub device: DeviceSpec,
    pub entry_file: String,
}

/// Residual (untracked) amount and whether it had to be clamped at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Untracked<T> {
    pub amount: T,
    pub clamped: bool,
}

/// Samples per second over the timed iterations.
pub fn compute_throughput(iter: &IterationMetrics) -> f64 {
    f64::from(iter.iterations_timed) * f64::from(iter.batch_size) * 1000.0 / iter.total_time_ms
}

/// Per-iteration time not attributed to any operation.
pub fn untracked_run_time(snapshot: &ProfileSnapshot) -> Untracked<f64> {
    let tracked: f64 = snapshot.operations.iter().map(|op| op.run_time_ms).sum();
    let raw = snapshot.iteration.per_iteration_ms() - tracked;
    if raw < 0.0 {
        Untracked {
            amount: 0.0,
            clamped: true,
        }
    } else {
        Untracked {
            amount: raw,
            clamped: false,
        }
    }
}

pub fn tracked_memory(snapshot: &ProfileSnapshot) -> u64 {
    let weights: u64 = snapshot.weights.iter().map(|w| w.bytes).sum();
    let activations: u64 = snapshot.operations.iter().map(|op| op.activation_bytes).sum();
    weights + activations
}

/// Peak memory not attributed to weights or activations.
pub fn untracked_memory(snapshot: &ProfileSnapshot) -> Untracked<u64> {
    let tracked = tracked_memory(snapshot);
    match snapshot.iteration.peak_memory_bytes.checked_sub(tracked) {
        Some(amount) => Untracked {
            amount,
            clamped: false,
        },
        None => Untracked {
            amount: 0,
            clamped: true,
        },
    }
}

/// A broken invariant found by [`validate_snapshot`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn check_stack(violations: &mut Vec<Violation>, field: String, stack: &[StackFrame]) {
    if stack.is_empty() {
        violations.push(Violation {
            field,
            rule: "stack must not be empty".into(),
        });
        return;
    }
    for (i, frame) in stack.iter().enumerate() {
        if frame.file_path.is_empty() {
            violations.push(Violation {
                field: format!("{field}.stack[{i}].file"),
                rule: "file path must not be empty".into(),
            });
        }
        if frame.line_number < 1 {
            violations.push(Violation {
                field: format!("{field}.stack[{i}].line"),
                rule: "line number must be >= 1".into(),
            });
        }
    }
}

/// Returns every invariant violation in `snapshot`; empty when well formed.
///
/// The shared-outermost-frame rule applies to operation stacks only. Weights
/// are created at model construction and may sit under a different frame.
pub fn validate_snapshot(snapshot: &ProfileSnapshot) -> Vec<Violation> {
    let mut violations = Vec::new();
    let iter = &snapshot.iteration;

    if iter.batch_size < 1 {
        violations.push(Violation {
            field: "iteration.batch_size".into(),
            rule: "must be >= 1".into(),
        });
    }
    if iter.iterations_timed < 1 {
        violations.push(Violation {
            field: "iteration.iterations_timed".into(),
            rule: "must be >= 1".into(),
        });
    }
    if !(iter.total_time_ms.is_finite() && iter.total_time_ms > 0.0) {
        violations.push(Violation {
            field: "iteration.total_time_ms".into(),
            rule: "must be finite and > 0".into(),
        });
    }
    if iter.peak_memory_bytes == 0 {
        violations.push(Violation {
            field: "iteration.peak_memory_bytes".into(),
            rule: "must be > 0".into(),
        });
    }
    if snapshot.device.memory_capacity_bytes == 0 {
        violations.push(Violation {
            field: "device.memory_capacity_bytes".into(),
            rule: "must be > 0".into(),
        });
    }

    for op in &snapshot.operations {
        let field = format!("operation `{}`", op.name);
        if !(op.run_time_ms.is_finite() && op.run_time_ms >= 0.0) {
            violations.push(Violation {
                field: format!("{field}.run_time_ms"),
                rule: "must be finite and >= 0".into(),
            });
        }
        check_stack(&mut violations, field, &op.stack);
    }
    for weight in &snapshot.weights {
        check_stack(&mut violations, format!("weight `{}`", weight.name), &weight.stack);
    }

    let mut roots = snapshot.operations.iter().filter_map(|op| op.stack.first());
    if let Some(first) = roots.next() {
        let mut seen = vec![first];
        for frame in roots {
            if !seen.contains(&frame) {
                seen.push(frame);
            }
        }
        if seen.len() > 1 {
            let frames: Vec<String> = seen.iter().map(|f| f.to_string()).collect();
            violations.push(Violation {
                field: "operations.stack[0]".into(),
                rule: format!(
                    "all operations must share one outermost frame, found {}",
                    frames.join(", ")
                ),
            });
        }
    }

    violations
}
