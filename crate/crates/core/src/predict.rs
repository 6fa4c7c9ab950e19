//! Linear run-time and memory models against batch size, sampling plans, and
//! forward/inverse what-if queries.
//!
//! Run time per iteration is `R(x) = a·x + b` (milliseconds), throughput is
//! `T(x) = 1000·x / R(x)` samples per second, and peak memory is
//! `M(x) = c·x + d` bytes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::breakdown::BreakdownTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    /// Slope `a` in ms/sample, intercept `b` in ms.
    RunTime,
    /// Slope `c` in bytes/sample, intercept `d` in bytes.
    Memory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub slope: f64,
    pub intercept: f64,
    pub fit_batches: Vec<u32>,
    pub role: ModelRole,
}

impl LinearModel {
    pub fn new(slope: f64, intercept: f64, role: ModelRole) -> Self {
        LinearModel {
            slope,
            intercept,
            fit_batches: Vec::new(),
            role,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    /// A non-positive slope cannot drive batch-size inversion.
    pub fn is_degenerate(&self) -> bool {
        !(self.slope > 0.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PredictError {
    #[error("need at least 3 samples to fit, got {0}")]
    TooFewSamples(usize),
    #[error("all samples share batch size {0}")]
    SingleBatch(u32),
    #[error("sample values must be finite")]
    NonFinite,
    #[error("batch size must be >= 1")]
    ZeroBatch,
    #[error("batch size {0} itself runs out of memory")]
    UserBatchInfeasible(u32),
    #[error("cannot build predictive model: fewer than 3 distinct feasible batch sizes around {0}")]
    NotEnoughBatches(u32),
    #[error("run time a·x + b = {0} ms is not positive")]
    NonPositiveRunTime(f64),
    #[error("model slope {0} must be > 0")]
    NonPositiveSlope(f64),
    #[error("model intercept {0} must be > 0")]
    NonPositiveIntercept(f64),
    #[error("target throughput {target} samples/s is not below the maximum {max} samples/s")]
    ThroughputUnreachable { target: f64, max: f64 },
    #[error("target throughput must be > 0")]
    NonPositiveTarget,
    #[error("target memory {target} bytes is below the one-sample footprint {minimum} bytes")]
    MemoryBelowMinimum { target: f64, minimum: f64 },
}

/// Ordinary least squares over `(batch, value)` samples.
///
/// A non-positive slope still yields a model; callers check
/// [`LinearModel::is_degenerate`] and disable inversion.
pub fn fit_linear(samples: &[(u32, f64)], role: ModelRole) -> Result<LinearModel, PredictError> {
    if samples.len() < 3 {
        return Err(PredictError::TooFewSamples(samples.len()));
    }
    if samples.iter().any(|&(_, y)| !y.is_finite()) {
        return Err(PredictError::NonFinite);
    }
    let first = samples[0].0;
    if samples.iter().all(|&(x, _)| x == first) {
        return Err(PredictError::SingleBatch(first));
    }

    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|&(x, _)| f64::from(x)).sum::<f64>() / n;
    let mean_y = samples.iter().map(|&(_, y)| y).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in samples {
        let dx = f64::from(x) - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;

    let mut fit_batches: Vec<u32> = samples.iter().map(|&(x, _)| x).collect();
    fit_batches.sort_unstable();
    fit_batches.dedup();
    Ok(LinearModel {
        slope,
        intercept,
        fit_batches,
        role,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanDirection {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSamplePlan {
    pub batches: [u32; 3],
    pub direction: PlanDirection,
}

/// Sampling increment for a user batch size: `max(1, ceil(b / 2))`.
pub fn sampling_step(user_batch: u32) -> u32 {
    user_batch.div_ceil(2).max(1)
}

/// Picks the three batch sizes to measure.
///
/// Samples upward from the user's batch in steps of [`sampling_step`]. When a
/// planned batch is known to run out of memory the plan goes downward
/// instead, shrinking the step until the three batches are distinct.
pub fn plan_batches(user_batch: u32, oom_batches: &BTreeSet<u32>) -> Result<BatchSamplePlan, PredictError> {
    if user_batch == 0 {
        return Err(PredictError::ZeroBatch);
    }
    if oom_batches.contains(&user_batch) {
        return Err(PredictError::UserBatchInfeasible(user_batch));
    }
    let step = sampling_step(user_batch);
    let up = [
        user_batch,
        user_batch.saturating_add(step),
        user_batch.saturating_add(step.saturating_mul(2)),
    ];
    let up_distinct = up[0] != up[1] && up[1] != up[2];
    if up_distinct && !up.iter().any(|b| oom_batches.contains(b)) {
        return Ok(BatchSamplePlan {
            batches: up,
            direction: PlanDirection::Up,
        });
    }

    for step in (1..=step).rev() {
        let down = [
            user_batch,
            user_batch.saturating_sub(step).max(1),
            user_batch.saturating_sub(2 * step).max(1),
        ];
        let distinct = down[0] != down[1] && down[1] != down[2] && down[0] != down[2];
        if distinct && !down.iter().any(|b| oom_batches.contains(b)) {
            return Ok(BatchSamplePlan {
                batches: down,
                direction: PlanDirection::Down,
            });
        }
    }
    Err(PredictError::NotEnoughBatches(user_batch))
}

/// `R(x)` in milliseconds.
pub fn run_time_at(model: &LinearModel, x: f64) -> f64 {
    model.eval(x)
}

/// Predicted samples per second at batch size `x`.
pub fn throughput_at(model: &LinearModel, x: f64) -> Result<f64, PredictError> {
    let run_time = model.eval(x);
    if !(run_time > 0.0) {
        return Err(PredictError::NonPositiveRunTime(run_time));
    }
    Ok(1000.0 * x / run_time)
}

/// Asymptotic throughput `1000 / a` samples per second.
pub fn max_throughput(model: &LinearModel) -> Result<f64, PredictError> {
    if !(model.slope > 0.0) {
        return Err(PredictError::NonPositiveSlope(model.slope));
    }
    Ok(1000.0 / model.slope)
}

/// `M(x)` in bytes.
pub fn memory_at(model: &LinearModel, x: f64) -> f64 {
    model.eval(x)
}

// Quotients this close to an integer are treated as that integer so that
// inverting a forward evaluation gives back the batch size it started from.
const SNAP_TOLERANCE: f64 = 1e-12;

/// Largest batch size whose predicted memory fits in `target_bytes`.
pub fn batch_from_memory(model: &LinearModel, target_bytes: f64) -> Result<u32, PredictError> {
    if !(model.slope > 0.0) {
        return Err(PredictError::NonPositiveSlope(model.slope));
    }
    let minimum = model.slope + model.intercept;
    let quotient = (target_bytes - model.intercept) / model.slope;
    let nearest = quotient.round();
    let batches = if (quotient - nearest).abs() <= SNAP_TOLERANCE * nearest.abs().max(1.0) {
        nearest
    } else {
        quotient.floor()
    };
    if batches < 1.0 {
        return Err(PredictError::MemoryBelowMinimum {
            target: target_bytes,
            minimum,
        });
    }
    Ok(batches.min(f64::from(u32::MAX)) as u32)
}

/// Batch size whose predicted throughput equals `target`, rounded half up.
pub fn batch_from_throughput(model: &LinearModel, target: f64) -> Result<u32, PredictError> {
    let max = max_throughput(model)?;
    if !(model.intercept > 0.0) {
        return Err(PredictError::NonPositiveIntercept(model.intercept));
    }
    if !(target > 0.0) {
        return Err(PredictError::NonPositiveTarget);
    }
    if target >= max {
        return Err(PredictError::ThroughputUnreachable { target, max });
    }
    // Solve t = x / (a·x + b) with t in samples per millisecond.
    let per_ms = target / 1000.0;
    let x = per_ms * model.intercept / (1.0 - per_ms * model.slope);
    Ok(round_half_up(x).clamp(1.0, f64::from(u32::MAX)) as u32)
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Predicted metrics at one batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub batch_size: u32,
    pub throughput_samples_per_s: f64,
    pub peak_memory_bytes: u64,
    pub feasible: bool,
}

pub fn predict_at(
    run_time: &LinearModel,
    memory: &LinearModel,
    batch_size: u32,
    capacity_bytes: u64,
) -> Result<Prediction, PredictError> {
    let x = f64::from(batch_size);
    let throughput = throughput_at(run_time, x)?;
    let peak = memory_at(memory, x).max(0.0).round() as u64;
    Ok(Prediction {
        batch_size,
        throughput_samples_per_s: throughput,
        peak_memory_bytes: peak,
        feasible: peak <= capacity_bytes,
    })
}

/// Breakdown rescaled to a different batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledBreakdown {
    pub tree: BreakdownTree,
    pub untracked_memory_bytes: u64,
    pub untracked_memory_clamped: bool,
    pub predicted_peak_bytes: f64,
}

/// Rescales a breakdown measured at `old_batch` to `new_batch`.
///
/// Activations scale with the batch ratio, weights stay fixed, and operation
/// run times scale by `R(new) / R(old)`. Untracked memory is whatever the
/// memory model predicts beyond weights and scaled activations.
pub fn scale_breakdown(
    tree: &BreakdownTree,
    run_time: &LinearModel,
    memory: &LinearModel,
    weights_total: u64,
    old_batch: u32,
    new_batch: u32,
) -> Result<ScaledBreakdown, PredictError> {
    if old_batch == 0 || new_batch == 0 {
        return Err(PredictError::ZeroBatch);
    }
    let scaled = if old_batch == new_batch {
        tree.clone()
    } else {
        let old_rt = run_time.eval(f64::from(old_batch));
        if !(old_rt > 0.0) {
            return Err(PredictError::NonPositiveRunTime(old_rt));
        }
        let factor = run_time.eval(f64::from(new_batch)) / old_rt;
        let (num, den) = (u128::from(new_batch), u128::from(old_batch));
        tree.map_operations(|op| {
            let mut op = op.clone();
            op.run_time_ms *= factor;
            op.activation_bytes = ((u128::from(op.activation_bytes) * num + den / 2) / den) as u64;
            op
        })
    };

    let predicted_peak_bytes = memory_at(memory, f64::from(new_batch));
    let tracked = weights_total as f64 + scaled.root.activation_bytes as f64;
    let raw = predicted_peak_bytes - tracked;
    Ok(ScaledBreakdown {
        tree: scaled,
        untracked_memory_bytes: raw.max(0.0).round() as u64,
        untracked_memory_clamped: raw < 0.0,
        predicted_peak_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::breakdown::build_tree;
    use crate::breakdown::tests::op;
    use proptest::prelude::*;

    const GIB: f64 = (1u64 << 30) as f64;

    fn rt(a: f64, b: f64) -> LinearModel {
        LinearModel::new(a, b, ModelRole::RunTime)
    }

    fn mem(c: f64, d: f64) -> LinearModel {
        LinearModel::new(c, d, ModelRole::Memory)
    }

    fn oom(batches: &[u32]) -> BTreeSet<u32> {
        batches.iter().copied().collect()
    }

    #[test]
    fn fit_examples() {
        let m = fit_linear(&[(8, 10.0), (16, 18.0), (24, 26.0)], ModelRole::RunTime).unwrap();
        assert_eq!((m.slope, m.intercept), (1.0, 2.0));
        assert_eq!(m.fit_batches, vec![8, 16, 24]);

        // Sxy = 128, Sxx = 128, mean y = 18.333.., mean x = 16
        let m = fit_linear(&[(8, 11.0), (16, 17.0), (24, 27.0)], ModelRole::RunTime).unwrap();
        assert!((m.slope - 1.0).abs() < 1e-12);
        assert!((m.intercept - 7.0 / 3.0).abs() < 1e-12);

        let m = fit_linear(&[(8, GIB), (16, 1.5 * GIB), (24, 2.0 * GIB)], ModelRole::Memory).unwrap();
        assert_eq!(m.slope, 0.0625 * GIB);
        assert_eq!(m.intercept, 0.5 * GIB);
    }

    #[test]
    fn fit_errors() {
        assert_eq!(
            fit_linear(&[(1, 1.0), (2, 2.0)], ModelRole::RunTime).unwrap_err(),
            PredictError::TooFewSamples(2)
        );
        assert_eq!(
            fit_linear(&[(4, 1.0), (4, 2.0), (4, 3.0)], ModelRole::RunTime).unwrap_err(),
            PredictError::SingleBatch(4)
        );
        let flat = fit_linear(&[(1, 5.0), (2, 4.0), (3, 3.0)], ModelRole::RunTime).unwrap();
        assert!(flat.is_degenerate());
    }

    #[test]
    fn plan_examples() {
        let plan = plan_batches(32, &oom(&[])).unwrap();
        assert_eq!(plan.batches, [32, 48, 64]);
        assert_eq!(plan.direction, PlanDirection::Up);

        // 32 - 2*16 = 0 is clamped to 1
        let plan = plan_batches(32, &oom(&[64])).unwrap();
        assert_eq!(plan.batches, [32, 16, 1]);
        assert_eq!(plan.direction, PlanDirection::Down);

        assert_eq!(
            plan_batches(1, &oom(&[2, 3])).unwrap_err(),
            PredictError::NotEnoughBatches(1)
        );
        assert_eq!(
            plan_batches(8, &oom(&[8])).unwrap_err(),
            PredictError::UserBatchInfeasible(8)
        );
    }

    #[test]
    fn plan_shrinks_step_to_stay_distinct() {
        // step 2 gives [3, 1, 1]; step 1 gives [3, 2, 1]
        let plan = plan_batches(3, &oom(&[5])).unwrap();
        assert_eq!(plan.batches, [3, 2, 1]);
        assert_eq!(plan_batches(2, &oom(&[3])).unwrap_err(), PredictError::NotEnoughBatches(2));
        assert_eq!(plan_batches(1, &oom(&[])).unwrap().batches, [1, 2, 3]);
    }

    #[test]
    fn throughput_examples() {
        let t = throughput_at(&rt(1.0, 2.0), 32.0).unwrap();
        assert!((t - 941.18).abs() < 0.01, "{t}");
        assert_eq!(throughput_at(&rt(1.0, 0.0), 17.0).unwrap(), 1000.0);
        assert!(matches!(throughput_at(&rt(-1.0, 2.0), 4.0), Err(PredictError::NonPositiveRunTime(_))));

        assert_eq!(max_throughput(&rt(1.0, 2.0)).unwrap(), 1000.0);
        assert_eq!(max_throughput(&rt(0.5, 2.0)).unwrap(), 2000.0);
        assert_eq!(max_throughput(&rt(1.25, 2.0)).unwrap(), 800.0);
        assert!(max_throughput(&rt(0.0, 2.0)).is_err());
    }

    #[test]
    fn memory_inverse_examples() {
        let m = mem(0.0625 * GIB, 0.5 * GIB);
        assert_eq!(batch_from_memory(&m, 8.0 * GIB).unwrap(), 120);
        assert_eq!(batch_from_memory(&m, 8.0 * GIB - 1.0).unwrap(), 119);
        assert_eq!(batch_from_memory(&m, memory_at(&m, 77.0)).unwrap(), 77);
        assert!(matches!(
            batch_from_memory(&m, 0.25 * GIB),
            Err(PredictError::MemoryBelowMinimum { .. })
        ));
        assert!(batch_from_memory(&m, 0.5625 * GIB).is_ok());
    }

    #[test]
    fn throughput_inverse_examples() {
        let m = rt(1.0, 2.0);
        assert_eq!(batch_from_throughput(&m, 800.0).unwrap(), 8);
        assert!(matches!(
            batch_from_throughput(&m, 1000.0),
            Err(PredictError::ThroughputUnreachable { .. })
        ));
        assert_eq!(batch_from_throughput(&m, 0.0).unwrap_err(), PredictError::NonPositiveTarget);
        assert_eq!(batch_from_throughput(&m, 1.0).unwrap(), 1);
    }

    #[test]
    fn predict_at_flags_feasibility() {
        let p = predict_at(&rt(1.0, 2.0), &mem(0.0625 * GIB, 0.5 * GIB), 121, 8 << 30).unwrap();
        assert!(!p.feasible);
        assert_eq!(p.batch_size, 121);
        let p = predict_at(&rt(1.0, 2.0), &mem(0.0625 * GIB, 0.5 * GIB), 120, 8 << 30).unwrap();
        assert!(p.feasible);
        assert_eq!(p.peak_memory_bytes, 8 << 30);
    }

    fn sample_tree() -> BreakdownTree {
        let ops = [
            op("a", 6.0, 1000, &[("e", 1), ("m", 2), ("x", 3)]),
            op("b", 3.0, 333, &[("e", 1), ("m", 2), ("y", 4)]),
            op("c", 1.0, 7, &[("e", 1), ("z", 5)]),
        ];
        build_tree(&ops, &[]).unwrap()
    }

    #[test]
    fn scale_identity_and_linearity() {
        let tree = sample_tree();
        let (r, m) = (rt(1.0, 2.0), mem(100.0, 5000.0));
        let same = scale_breakdown(&tree, &r, &m, 0, 16, 16).unwrap();
        assert_eq!(same.tree, tree);

        let doubled = scale_breakdown(&tree, &r, &m, 0, 16, 32).unwrap();
        for ((_, before), (_, after)) in tree.walk().into_iter().zip(doubled.tree.walk()) {
            assert_eq!(after.activation_bytes, 2 * before.activation_bytes);
            assert_eq!(after.weight_bytes, before.weight_bytes);
        }
        let factor = (32.0 + 2.0) / (16.0 + 2.0);
        assert!((doubled.tree.root.run_time_ms - 10.0 * factor).abs() < 1e-12);
        assert_eq!(
            doubled.untracked_memory_bytes,
            (100.0 * 32.0 + 5000.0 - 2.0 * 1340.0) as u64
        );
    }

    proptest! {
        #[test]
        fn collinear_fit_recovers_exactly(a in 1e-3f64..1e3, b in -1e3f64..1e3, x0 in 1u32..256, step in 1u32..64) {
            let xs = [x0, x0 + step, x0 + 2 * step];
            let samples: Vec<(u32, f64)> = xs.iter().map(|&x| (x, a * f64::from(x) + b)).collect();
            let m = fit_linear(&samples, ModelRole::RunTime).unwrap();
            let scale = a.abs().max(b.abs());
            prop_assert!((m.slope - a).abs() <= 1e-12 * scale.max(a.abs()) * 4.0);
            prop_assert!((m.intercept - b).abs() <= 1e-12 * scale * f64::from(x0 + 2 * step));
        }

        #[test]
        fn throughput_increasing_and_bounded(a in 1e-3f64..10.0, b in 1e-3f64..1e3, x in 1u32..100_000) {
            let m = rt(a, b);
            let t0 = throughput_at(&m, f64::from(x)).unwrap();
            let t1 = throughput_at(&m, f64::from(x) + 1.0).unwrap();
            prop_assert!(t1 > t0);
            prop_assert!(t1 < max_throughput(&m).unwrap());
        }

        #[test]
        fn inverse_round_trips(a in 1e-3f64..10.0, b in 1e-3f64..1e3, c in 1.0f64..1e8, d in 0.0f64..1e10, x in 1u32..4096) {
            let r = rt(a, b);
            let m = mem(c, d);
            let xf = f64::from(x);
            prop_assert_eq!(batch_from_memory(&m, memory_at(&m, xf)).unwrap(), x);
            let t = throughput_at(&r, xf).unwrap();
            if t < max_throughput(&r).unwrap() {
                let back = batch_from_throughput(&r, t).unwrap();
                prop_assert!((i64::from(back) - i64::from(x)).abs() <= 1);
            }
        }

        #[test]
        fn refit_is_homogeneous(a in 0.1f64..10.0, b in 0.1f64..100.0, k in 0.1f64..10.0, x in 2u32..512) {
            let xs = [32u32, 48, 64];
            let base: Vec<(u32, f64)> = xs.iter().map(|&x| (x, a * f64::from(x) + b)).collect();
            let scaled: Vec<(u32, f64)> = base.iter().map(|&(x, y)| (x, y / k)).collect();
            let m1 = fit_linear(&base, ModelRole::RunTime).unwrap();
            let m2 = fit_linear(&scaled, ModelRole::RunTime).unwrap();
            prop_assert!((m2.slope - m1.slope / k).abs() <= 1e-9 * m1.slope / k);
            prop_assert!((m2.intercept - m1.intercept / k).abs() <= 1e-9 * (m1.intercept / k).abs().max(1e-9));
            // Throughput scales by k, so the inverse maps k·T back to the same batch.
            let t = throughput_at(&m1, f64::from(x)).unwrap();
            let b1 = batch_from_throughput(&m1, t).unwrap();
            let b2 = batch_from_throughput(&m2, t * k).unwrap();
            prop_assert!((i64::from(b1) - i64::from(b2)).abs() <= 1);
        }
    }
}
