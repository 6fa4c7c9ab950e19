//! JSON reports printed by the one-shot `profile` and `predict` commands.

use serde::Serialize;
use thiserror::Error;

use super::analysis::AnalysisResult;
use crate::breakdown::{NodeKind, NodePath, SortKey};
use crate::predict::{batch_from_memory, batch_from_throughput, predict_at, PredictError, Prediction};
use crate::protocol::{MemoryCoefficients, RunTimeCoefficients};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportNode {
    pub display_name: String,
    pub kind: NodeKind,
    pub file: String,
    pub line: u32,
    pub run_time_ms: f64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub leaf_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileReport {
    pub batch_size: u32,
    pub throughput_samples_per_s: f64,
    pub max_throughput_samples_per_s: Option<f64>,
    pub peak_memory_bytes: u64,
    pub capacity_bytes: u64,
    pub max_batch_size: Option<u32>,
    pub untracked_run_time_ms: f64,
    pub untracked_memory_bytes: u64,
    pub run_time_model: Option<RunTimeCoefficients>,
    pub memory_model: Option<MemoryCoefficients>,
    pub sampled_batches: Vec<u32>,
    pub prediction_disabled: Option<String>,
    /// Top-level breakdown, sorted by run time.
    pub breakdown: Vec<ReportNode>,
}

pub fn profile_report(result: &AnalysisResult) -> ProfileReport {
    let km = &result.key_metrics;
    let payload = result.key_metrics_payload();
    let breakdown = result
        .tree
        .children_at(&NodePath::root(), SortKey::RunTime)
        .expect("root path is valid")
        .into_iter()
        .map(|n| ReportNode {
            display_name: n.display_name.clone(),
            kind: n.kind,
            file: n.frame.file_path.clone(),
            line: n.frame.line_number,
            run_time_ms: n.run_time_ms,
            weight_bytes: n.weight_bytes,
            activation_bytes: n.activation_bytes,
            leaf_count: n.leaf_count,
        })
        .collect();
    ProfileReport {
        batch_size: km.batch_size,
        throughput_samples_per_s: km.throughput_samples_per_s,
        max_throughput_samples_per_s: km.max_throughput_samples_per_s,
        peak_memory_bytes: km.peak_memory_bytes,
        capacity_bytes: km.capacity_bytes,
        max_batch_size: km.max_batch_size,
        untracked_run_time_ms: km.untracked_run_time_ms,
        untracked_memory_bytes: km.untracked_memory_bytes,
        run_time_model: payload.run_time_model,
        memory_model: payload.memory_model,
        sampled_batches: result.snapshots.keys().copied().collect(),
        prediction_disabled: result.models.as_ref().err().cloned(),
        breakdown,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictTarget {
    /// Samples per second.
    Throughput(f64),
    /// Bytes.
    Memory(f64),
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("prediction disabled: {0}")]
    Disabled(String),
    #[error(transparent)]
    Predict(#[from] PredictError),
}

/// Translates a throughput or memory target into a batch size prediction.
pub fn predict_report(result: &AnalysisResult, target: PredictTarget) -> Result<Prediction, ReportError> {
    let models = result.models.as_ref().map_err(|r| ReportError::Disabled(r.clone()))?;
    let batch = match target {
        PredictTarget::Throughput(t) => batch_from_throughput(&models.run_time, t)?,
        PredictTarget::Memory(m) => batch_from_memory(&models.memory, m)?,
    };
    Ok(predict_at(
        &models.run_time,
        &models.memory,
        batch,
        result.key_metrics.capacity_bytes,
    )?)
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("reports always serialize");
    text.push('\n');
    text
}
