//! Line-delimited JSON trace format and the synthetic trace generator.
//!
//! A trace is UTF-8 text with one JSON object per line. The `type` field
//! selects the record kind. [`write_trace`] always emits the canonical order:
//! `meta`, then for each batch size ascending its `iteration` record followed
//! by that batch's `weight` and `operation` records, then all `oom` records.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_snapshot, DeviceSpec, IterationMetrics, OperationMeasurement, ProfileSnapshot,
    StackFrame, WeightMeasurement,
};

pub const TRACE_EXTENSION: &str = "trace.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Meta {
        device_name: String,
        memory_capacity_bytes: u64,
        entry_file: String,
    },
    Iteration {
        batch_size: u32,
        iterations_timed: u32,
        total_time_ms: f64,
        peak_memory_bytes: u64,
    },
    Operation {
        name: String,
        run_time_ms: f64,
        activation_bytes: u64,
        stack: Vec<StackFrame>,
    },
    Weight {
        name: String,
        bytes: u64,
        stack: Vec<StackFrame>,
    },
    Oom {
        batch_size: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceMeta {
    pub device: DeviceSpec,
    pub entry_file: String,
}

/// Parsed trace: one snapshot per distinct batch size (ascending) and the
/// batch sizes that ran out of memory (ascending, deduplicated).
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub snapshots: Vec<ProfileSnapshot>,
    pub ooms: Vec<u32>,
}

impl Trace {
    pub fn snapshot(&self, batch_size: u32) -> Option<&ProfileSnapshot> {
        self.snapshots
            .iter()
            .find(|s| s.iteration.batch_size == batch_size)
    }

    pub fn batch_sizes(&self) -> Vec<u32> {
        self.snapshots.iter().map(|s| s.iteration.batch_size).collect()
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: meta must be first")]
    MetaNotFirst { line: usize },
    #[error("line {line}: duplicate meta record")]
    DuplicateMeta { line: usize },
    #[error("line {line}: duplicate iteration record for batch size {batch_size}")]
    DuplicateBatch { line: usize, batch_size: u32 },
    #[error("line {line}: invalid snapshot for batch size {batch_size}: {violations}")]
    InvalidSnapshot {
        line: usize,
        batch_size: u32,
        violations: String,
    },
    #[error("trace has no iteration record")]
    NoIteration,
    #[error("empty trace")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

struct PendingSnapshot {
    line: usize,
    iteration: Option<IterationMetrics>,
    operations: Vec<OperationMeasurement>,
    weights: Vec<WeightMeasurement>,
}

impl PendingSnapshot {
    fn new(line: usize) -> Self {
        PendingSnapshot {
            line,
            iteration: None,
            operations: Vec::new(),
            weights: Vec::new(),
        }
    }
}

/// Parses a trace.
///
/// Weight and operation records belong to the closest preceding `iteration`
/// record. Records that appear before the first `iteration` record belong to
/// the first one, which lets a single-batch collector emit its measurements
/// before the iteration totals.
pub fn read_trace<R: BufRead>(reader: R) -> Result<Trace, TraceError> {
    let mut meta: Option<TraceMeta> = None;
    let mut groups: Vec<PendingSnapshot> = Vec::new();
    let mut ooms = BTreeSet::new();
    let mut saw_any = false;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord =
            serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
                line: line_no,
                reason: e.to_string(),
            })?;

        if let TraceRecord::Meta {
            device_name,
            memory_capacity_bytes,
            entry_file,
        } = record
        {
            if meta.is_some() {
                return Err(TraceError::DuplicateMeta { line: line_no });
            }
            if saw_any {
                return Err(TraceError::MetaNotFirst { line: line_no });
            }
            meta = Some(TraceMeta {
                device: DeviceSpec {
                    name: device_name,
                    memory_capacity_bytes,
                },
                entry_file,
            });
            saw_any = true;
            continue;
        }
        if meta.is_none() {
            return Err(TraceError::MetaNotFirst { line: line_no });
        }
        saw_any = true;

        match record {
            TraceRecord::Meta { .. } => unreachable!(),
            TraceRecord::Iteration {
                batch_size,
                iterations_timed,
                total_time_ms,
                peak_memory_bytes,
            } => {
                let iteration = IterationMetrics {
                    batch_size,
                    iterations_timed,
                    total_time_ms,
                    peak_memory_bytes,
                };
                if groups.iter().any(|g| {
                    g.iteration
                        .is_some_and(|it| it.batch_size == batch_size)
                }) {
                    return Err(TraceError::DuplicateBatch {
                        line: line_no,
                        batch_size,
                    });
                }
                match groups.last_mut() {
                    Some(group) if group.iteration.is_none() => {
                        group.line = line_no;
                        group.iteration = Some(iteration);
                    }
                    _ => {
                        let mut group = PendingSnapshot::new(line_no);
                        group.iteration = Some(iteration);
                        groups.push(group);
                    }
                }
            }
            TraceRecord::Operation {
                name,
                run_time_ms,
                activation_bytes,
                stack,
            } => {
                if groups.is_empty() {
                    groups.push(PendingSnapshot::new(line_no));
                }
                groups.last_mut().unwrap().operations.push(OperationMeasurement {
                    name,
                    run_time_ms,
                    activation_bytes,
                    stack,
                });
            }
            TraceRecord::Weight { name, bytes, stack } => {
                if groups.is_empty() {
                    groups.push(PendingSnapshot::new(line_no));
                }
                groups
                    .last_mut()
                    .unwrap()
                    .weights
                    .push(WeightMeasurement { name, bytes, stack });
            }
            TraceRecord::Oom { batch_size } => {
                ooms.insert(batch_size);
            }
        }
    }

    let meta = match meta {
        Some(meta) => meta,
        None if !saw_any => return Err(TraceError::Empty),
        None => unreachable!(),
    };

    let mut snapshots = Vec::with_capacity(groups.len());
    for group in groups {
        let Some(iteration) = group.iteration else {
            // Only possible when measurements precede nothing at all.
            return Err(TraceError::NoIteration);
        };
        let snapshot = ProfileSnapshot {
            iteration,
            operations: group.operations,
            weights: group.weights,
            device: meta.device.clone(),
            entry_file: meta.entry_file.clone(),
        };
        let violations = validate_snapshot(&snapshot);
        if !violations.is_empty() {
            let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(TraceError::InvalidSnapshot {
                line: group.line,
                batch_size: iteration.batch_size,
                violations: text.join("; "),
            });
        }
        snapshots.push(snapshot);
    }
    if snapshots.is_empty() {
        return Err(TraceError::NoIteration);
    }
    snapshots.sort_by_key(|s| s.iteration.batch_size);

    Ok(Trace {
        meta,
        snapshots,
        ooms: ooms.into_iter().collect(),
    })
}

pub fn read_trace_bytes(bytes: &[u8]) -> Result<Trace, TraceError> {
    read_trace(bytes)
}

fn write_record<W: Write>(out: &mut W, record: &TraceRecord) -> io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

/// Writes `trace` in canonical record order.
pub fn write_trace<W: Write>(mut out: W, trace: &Trace) -> io::Result<()> {
    write_record(
        &mut out,
        &TraceRecord::Meta {
            device_name: trace.meta.device.name.clone(),
            memory_capacity_bytes: trace.meta.device.memory_capacity_bytes,
            entry_file: trace.meta.entry_file.clone(),
        },
    )?;

    let mut snapshots: Vec<&ProfileSnapshot> = trace.snapshots.iter().collect();
    snapshots.sort_by_key(|s| s.iteration.batch_size);
    for snapshot in snapshots {
        let it = &snapshot.iteration;
        write_record(
            &mut out,
            &TraceRecord::Iteration {
                batch_size: it.batch_size,
                iterations_timed: it.iterations_timed,
                total_time_ms: it.total_time_ms,
                peak_memory_bytes: it.peak_memory_bytes,
            },
        )?;
        for w in &snapshot.weights {
            write_record(
                &mut out,
                &TraceRecord::Weight {
                    name: w.name.clone(),
                    bytes: w.bytes,
                    stack: w.stack.clone(),
                },
            )?;
        }
        for op in &snapshot.operations {
            write_record(
                &mut out,
                &TraceRecord::Operation {
                    name: op.name.clone(),
                    run_time_ms: op.run_time_ms,
                    activation_bytes: op.activation_bytes,
                    stack: op.stack.clone(),
                },
            )?;
        }
    }

    let ooms: BTreeSet<u32> = trace.ooms.iter().copied().collect();
    for batch_size in ooms {
        write_record(&mut out, &TraceRecord::Oom { batch_size })?;
    }
    out.flush()
}

pub fn write_trace_bytes(trace: &Trace) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(&mut buf, trace).expect("writing to a Vec cannot fail");
    buf
}

/// Ground-truth parameters of a synthetic workload.
///
/// Per-iteration run time is `a_ms_per_sample * x + b_ms` and peak memory is
/// `c_bytes_per_sample * x + d_bytes`, each perturbed by a seeded uniform
/// factor in `[1 - noise_fraction, 1 + noise_fraction)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub a_ms_per_sample: f64,
    pub b_ms: f64,
    pub c_bytes_per_sample: u64,
    pub d_bytes: u64,
    pub op_count: u32,
    pub tree_depth: u32,
    pub noise_fraction: f64,
    pub seed: u64,
    pub capacity_bytes: u64,
}

/// Share of iteration time and memory left untracked in synthetic traces.
pub const SYNTHETIC_UNTRACKED_FRACTION: f64 = 0.1;
pub const SYNTHETIC_ENTRY_FILE: &str = "train.py";
const SYNTHETIC_ROOT_LINE: u32 = 42;
const SYNTHETIC_ITERATIONS: u32 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("batch size list is empty")]
    NoBatches,
    #[error("batch size {0} is listed more than once")]
    DuplicateBatch(u32),
    #[error("batch sizes must be >= 1")]
    ZeroBatch,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(&'static str),
}

impl SyntheticSpec {
    fn check(&self) -> Result<(), SyntheticError> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.a_ms_per_sample) {
            return Err(SyntheticError::InvalidSpec("a must be > 0"));
        }
        if !finite_pos(self.b_ms) {
            return Err(SyntheticError::InvalidSpec("b must be > 0"));
        }
        if self.c_bytes_per_sample == 0 || self.d_bytes == 0 {
            return Err(SyntheticError::InvalidSpec("c and d must be > 0"));
        }
        if self.op_count == 0 || self.tree_depth == 0 {
            return Err(SyntheticError::InvalidSpec("ops and depth must be > 0"));
        }
        if !(0.0..=0.1).contains(&self.noise_fraction) {
            return Err(SyntheticError::InvalidSpec("noise must be in [0, 0.1]"));
        }
        if self.capacity_bytes == 0 {
            return Err(SyntheticError::InvalidSpec("capacity must be > 0"));
        }
        Ok(())
    }

    /// Noiseless per-iteration run time at batch size `x`.
    pub fn run_time_ms(&self, x: u32) -> f64 {
        self.a_ms_per_sample * f64::from(x) + self.b_ms
    }

    /// Noiseless peak memory at batch size `x`.
    pub fn memory_bytes(&self, x: u32) -> u128 {
        u128::from(self.c_bytes_per_sample) * u128::from(x) + u128::from(self.d_bytes)
    }

    pub fn fits_in_memory(&self, x: u32) -> bool {
        self.memory_bytes(x) <= u128::from(self.capacity_bytes)
    }

    fn noise_factors(&self, x: u32) -> (f64, f64) {
        // One stream per batch size keeps each batch's noise independent of
        // which other batches were requested.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from(x));
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        (
            1.0 + self.noise_fraction * (2.0 * u1 - 1.0),
            1.0 + self.noise_fraction * (2.0 * u2 - 1.0),
        )
    }
}

/// Fraction of the tracked total assigned to op `i` (0-based) of `n`:
/// `2(n - i) / (n(n + 1))`, strictly decreasing in `i` and summing to one.
pub fn synthetic_share(i: u32, n: u32) -> f64 {
    2.0 * f64::from(n - i) / (f64::from(n) * f64::from(n + 1))
}

fn split_bytes(total: u64, n: u32) -> Vec<u64> {
    let n64 = u128::from(n);
    let denom = n64 * (n64 + 1);
    let mut parts: Vec<u64> = (0..n)
        .map(|i| (u128::from(total) * 2 * (n64 - u128::from(i)) / denom) as u64)
        .collect();
    let assigned: u64 = parts.iter().sum();
    parts[0] += total - assigned;
    parts
}

/// Frame of module level `level` (1-based) containing op `i`. Groups at each
/// level are contiguous ranges that refine the groups of the level above.
fn module_frame(level: u32, i: u32, n: u32) -> StackFrame {
    let groups = 1u64 << level.min(20);
    let group = u64::from(i) * groups / u64::from(n);
    StackFrame::new(format!("model/level{level}.py"), 10 + group as u32)
}

fn synthetic_stack(i: u32, spec: &SyntheticSpec) -> Vec<StackFrame> {
    let mut stack = Vec::with_capacity(spec.tree_depth as usize + 1);
    stack.push(StackFrame::new(SYNTHETIC_ENTRY_FILE, SYNTHETIC_ROOT_LINE));
    for level in 1..spec.tree_depth {
        stack.push(module_frame(level, i, spec.op_count));
    }
    stack.push(StackFrame::new("model/ops.py", 100 + i));
    stack
}

/// Builds a synthetic trace for `batch_sizes`.
///
/// Batches whose noiseless memory `c·x + d` exceeds the capacity become `oom`
/// records. Operation stacks are `tree_depth + 1` frames long and share the
/// entry frame, so the breakdown tree is `tree_depth` levels deep.
pub fn generate_synthetic(spec: &SyntheticSpec, batch_sizes: &[u32]) -> Result<Trace, SyntheticError> {
    spec.check()?;
    if batch_sizes.is_empty() {
        return Err(SyntheticError::NoBatches);
    }
    let mut seen = BTreeSet::new();
    for &x in batch_sizes {
        if x == 0 {
            return Err(SyntheticError::ZeroBatch);
        }
        if !seen.insert(x) {
            return Err(SyntheticError::DuplicateBatch(x));
        }
    }

    let device = DeviceSpec {
        name: "synthetic".into(),
        memory_capacity_bytes: spec.capacity_bytes,
    };
    let n = spec.op_count;
    let stacks: Vec<Vec<StackFrame>> = (0..n).map(|i| synthetic_stack(i, spec)).collect();
    let weight_total = (spec.d_bytes as f64 * (1.0 - SYNTHETIC_UNTRACKED_FRACTION)) as u64;
    let weight_parts = split_bytes(weight_total, n);
    let weights: Vec<WeightMeasurement> = (0..n)
        .map(|i| {
            let stack = &stacks[i as usize];
            WeightMeasurement {
                name: format!("layer{i}.weight"),
                bytes: weight_parts[i as usize],
                // Weights are created by the module that owns the op.
                stack: stack[..stack.len() - 1].to_vec(),
            }
        })
        .filter(|w| !w.stack.is_empty())
        .collect();

    let mut snapshots = Vec::new();
    let mut ooms = Vec::new();
    for &x in &seen {
        if !spec.fits_in_memory(x) {
            ooms.push(x);
            continue;
        }
        let (time_factor, mem_factor) = spec.noise_factors(x);
        let per_iter = spec.run_time_ms(x) * time_factor;
        let peak = if spec.noise_fraction == 0.0 {
            spec.memory_bytes(x) as u64
        } else {
            (spec.memory_bytes(x) as f64 * mem_factor).round() as u64
        };

        let tracked_time = per_iter * (1.0 - SYNTHETIC_UNTRACKED_FRACTION);
        let tracked_mem = (peak as f64 * (1.0 - SYNTHETIC_UNTRACKED_FRACTION)) as u64;
        let activation_parts = split_bytes(tracked_mem.saturating_sub(weight_total), n);

        let operations = (0..n)
            .map(|i| OperationMeasurement {
                name: format!("op{i}"),
                run_time_ms: tracked_time * synthetic_share(i, n),
                activation_bytes: activation_parts[i as usize],
                stack: stacks[i as usize].clone(),
            })
            .collect();

        snapshots.push(ProfileSnapshot {
            iteration: IterationMetrics {
                batch_size: x,
                iterations_timed: SYNTHETIC_ITERATIONS,
                total_time_ms: f64::from(SYNTHETIC_ITERATIONS) * per_iter,
                peak_memory_bytes: peak,
            },
            operations,
            weights: weights.clone(),
            device: device.clone(),
            entry_file: SYNTHETIC_ENTRY_FILE.into(),
        });
    }

    Ok(Trace {
        meta: TraceMeta {
            device,
            entry_file: SYNTHETIC_ENTRY_FILE.into(),
        },
        snapshots,
        ooms,
    })
}

pub fn generate_synthetic_trace(spec: &SyntheticSpec, batch_sizes: &[u32]) -> Result<Vec<u8>, SyntheticError> {
    generate_synthetic(spec, batch_sizes).map(|t| write_trace_bytes(&t))
}
