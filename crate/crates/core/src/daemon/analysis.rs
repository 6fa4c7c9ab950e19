//! One profiling analysis: sample three batch sizes, fit both models, build
//! the breakdown for the user's batch size and locate its literal.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use super::backend::{BackendError, Measurement, ProfilerBackend};
use crate::breakdown::{BreakdownError, BreakdownTree};
use crate::model::{compute_throughput, untracked_memory, untracked_run_time, ProfileSnapshot};
use crate::mutate::{locate_batch_kwarg, LiteralSpan, MutationTarget};
use crate::predict::{
    batch_from_memory, fit_linear, max_throughput, plan_batches, BatchSamplePlan, LinearModel,
    ModelRole, PredictError,
};
use crate::protocol::{BatchSpan, KeyMetricsPayload, MemoryCoefficients, RunTimeCoefficients};

#[derive(Debug, Clone, Default)]
pub struct AnalysisOptions {
    /// Source file holding the input provider, if any.
    pub entry_file: Option<PathBuf>,
    pub target: MutationTarget,
    /// Overrides the batch size read from the source file.
    pub user_batch: Option<u32>,
    pub capacity_override: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModels {
    pub run_time: LinearModel,
    pub memory: LinearModel,
    pub plan: BatchSamplePlan,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeyMetrics {
    pub batch_size: u32,
    pub throughput_samples_per_s: f64,
    /// Asymptotic throughput from the run-time model.
    pub max_throughput_samples_per_s: Option<f64>,
    pub peak_memory_bytes: u64,
    pub capacity_bytes: u64,
    /// Largest batch size the memory model fits into the device.
    pub max_batch_size: Option<u32>,
    pub untracked_run_time_ms: f64,
    pub untracked_memory_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub user_batch: u32,
    pub snapshots: BTreeMap<u32, ProfileSnapshot>,
    /// Fitted models, or why prediction is disabled.
    pub models: Result<FittedModels, String>,
    pub tree: BreakdownTree,
    pub key_metrics: KeyMetrics,
    pub span: Option<LiteralSpan>,
    /// Why the batch size literal could not be located.
    pub mutation_error: Option<String>,
}

impl AnalysisResult {
    pub fn user_snapshot(&self) -> &ProfileSnapshot {
        &self.snapshots[&self.user_batch]
    }

    pub fn key_metrics_payload(&self) -> KeyMetricsPayload {
        let km = &self.key_metrics;
        let (run_time_model, memory_model) = match &self.models {
            Ok(m) => (
                Some(RunTimeCoefficients {
                    a_ms: m.run_time.slope,
                    b_ms: m.run_time.intercept,
                }),
                Some(MemoryCoefficients {
                    c_bytes: m.memory.slope,
                    d_bytes: m.memory.intercept,
                }),
            ),
            Err(_) => (None, None),
        };
        KeyMetricsPayload {
            batch_size: km.batch_size,
            throughput_samples_per_s: km.throughput_samples_per_s,
            max_throughput_samples_per_s: km
                .max_throughput_samples_per_s
                .unwrap_or(km.throughput_samples_per_s),
            peak_memory_bytes: km.peak_memory_bytes,
            capacity_bytes: km.capacity_bytes,
            run_time_model,
            memory_model,
            batch_span: self.span.map(|s| BatchSpan {
                line: s.line_number,
                byte_start: s.byte_start,
                byte_end: s.byte_end,
            }),
            max_batch_size: km.max_batch_size,
            prediction_disabled: self.disabled_reason(),
        }
    }

    /// Why dragging is disabled, if it is.
    pub fn disabled_reason(&self) -> Option<String> {
        match (&self.models, &self.mutation_error) {
            (Err(reason), _) => Some(reason.clone()),
            (Ok(_), Some(reason)) => Some(reason.clone()),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no batch size: {0}")]
    NoBatchSize(String),
    #[error("batch size {0} is not available from the backend")]
    UserBatchUnavailable(u32),
    #[error("batch size {0} runs out of memory")]
    UserBatchOutOfMemory(u32),
    #[error("cannot build breakdown: {0}")]
    Breakdown(#[from] BreakdownError),
}

impl AnalysisError {
    /// Short code used in `analysis_error` messages.
    pub fn code(&self) -> &'static str {
        match self {
            AnalysisError::Backend(_) => "backend",
            AnalysisError::NoBatchSize(_) => "mutation",
            AnalysisError::UserBatchUnavailable(_) => "backend",
            AnalysisError::UserBatchOutOfMemory(_) => "oom",
            AnalysisError::Breakdown(_) => "breakdown",
        }
    }
}

fn fit_models(
    snapshots: &BTreeMap<u32, ProfileSnapshot>,
    plan: &BatchSamplePlan,
) -> Result<FittedModels, String> {
    let samples: Vec<&ProfileSnapshot> = plan.batches.iter().map(|b| &snapshots[b]).collect();
    let run_samples: Vec<(u32, f64)> = samples
        .iter()
        .map(|s| (s.iteration.batch_size, s.iteration.per_iteration_ms()))
        .collect();
    let mem_samples: Vec<(u32, f64)> = samples
        .iter()
        .map(|s| (s.iteration.batch_size, s.iteration.peak_memory_bytes as f64))
        .collect();
    let run_time = fit_linear(&run_samples, ModelRole::RunTime).map_err(|e| e.to_string())?;
    let memory = fit_linear(&mem_samples, ModelRole::Memory).map_err(|e| e.to_string())?;
    if run_time.is_degenerate() {
        return Err(format!("degenerate run-time fit (slope {})", run_time.slope));
    }
    if memory.is_degenerate() {
        return Err(format!("degenerate memory fit (slope {})", memory.slope));
    }
    Ok(FittedModels {
        run_time,
        memory,
        plan: plan.clone(),
    })
}

/// Runs one analysis against `backend`.
pub fn run_analysis(
    backend: &dyn ProfilerBackend,
    options: &AnalysisOptions,
) -> Result<AnalysisResult, AnalysisError> {
    let (span, mutation_error) = match &options.entry_file {
        Some(path) => match fs::read_to_string(path) {
            Ok(source) => match locate_batch_kwarg(&source, &options.target) {
                Ok(span) => (Some(span), None),
                Err(e) => (None, Some(e.to_string())),
            },
            Err(e) => (None, Some(format!("cannot read {}: {e}", path.display()))),
        },
        None => (None, None),
    };

    let mut run = backend.start()?;
    let user_batch = options
        .user_batch
        .or_else(|| span.and_then(|s| u32::try_from(s.current_value).ok()))
        .or_else(|| run.fallback_batch())
        .ok_or_else(|| {
            AnalysisError::NoBatchSize(
                mutation_error
                    .clone()
                    .unwrap_or_else(|| "no batch size given".to_owned()),
            )
        })?;

    let with_capacity = |mut s: ProfileSnapshot| {
        if let Some(capacity) = options.capacity_override {
            s.device.memory_capacity_bytes = capacity;
        }
        s
    };

    let mut snapshots = BTreeMap::new();
    match run.measure(user_batch)? {
        Measurement::Snapshot(s) => {
            snapshots.insert(user_batch, with_capacity(s));
        }
        Measurement::OutOfMemory => return Err(AnalysisError::UserBatchOutOfMemory(user_batch)),
        Measurement::Unavailable => return Err(AnalysisError::UserBatchUnavailable(user_batch)),
    }

    let mut ooms = run.known_ooms();
    let mut replanned = false;
    let models = 'sampling: loop {
        let plan = match plan_batches(user_batch, &ooms) {
            Ok(plan) => plan,
            Err(e) => break Err(e.to_string()),
        };
        for &batch in &plan.batches[1..] {
            if snapshots.contains_key(&batch) {
                continue;
            }
            match run.measure(batch)? {
                Measurement::Snapshot(s) => {
                    snapshots.insert(batch, with_capacity(s));
                }
                Measurement::OutOfMemory => {
                    ooms.insert(batch);
                    if replanned {
                        break 'sampling Err(PredictError::NotEnoughBatches(user_batch).to_string());
                    }
                    replanned = true;
                    continue 'sampling;
                }
                Measurement::Unavailable => {
                    break 'sampling Err(format!("batch size {batch} is not available for sampling"));
                }
            }
        }
        break fit_models(&snapshots, &plan);
    };
    if let Err(reason) = &models {
        log::info!("prediction disabled: {reason}");
    }

    let user = &snapshots[&user_batch];
    let tree = BreakdownTree::build(&user.operations, &user.weights)?;
    let capacity = user.device.memory_capacity_bytes;
    let key_metrics = KeyMetrics {
        batch_size: user_batch,
        throughput_samples_per_s: compute_throughput(&user.iteration),
        max_throughput_samples_per_s: models.as_ref().ok().and_then(|m| max_throughput(&m.run_time).ok()),
        peak_memory_bytes: user.iteration.peak_memory_bytes,
        capacity_bytes: capacity,
        max_batch_size: models
            .as_ref()
            .ok()
            .and_then(|m| batch_from_memory(&m.memory, capacity as f64).ok()),
        untracked_run_time_ms: untracked_run_time(user).amount,
        untracked_memory_bytes: untracked_memory(user).amount,
    };

    Ok(AnalysisResult {
        user_batch,
        snapshots,
        models,
        tree,
        key_metrics,
        span,
        mutation_error,
    })
}
