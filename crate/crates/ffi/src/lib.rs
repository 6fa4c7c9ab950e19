//! C ABI over the batchscope core.
//!
//! Every fallible function returns a [`BsStatus`]. On failure the message is
//! kept per thread and read back with [`bs_last_error`]. Handles are opaque
//! and owned by the caller once returned; release them with the matching
//! `_free` function. Strings returned through `out` parameters are released
//! with [`bs_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use libc::c_char;

use batchscope::breakdown::{NodePath, SortKey};
use batchscope::daemon::analysis::{run_analysis, AnalysisOptions, AnalysisResult};
use batchscope::daemon::backend::ReplayBackend;
use batchscope::daemon::report::{profile_report, to_pretty_json};
use batchscope::mutate::{apply_batch_size, locate_batch_kwarg, LiteralSpan, MutationTarget};
use batchscope::predict::{
    batch_from_memory, batch_from_throughput, fit_linear, max_throughput, LinearModel, ModelRole,
};
use batchscope::protocol::{breakdown_nodes, PROTOCOL_VERSION};
use batchscope::trace::{generate_synthetic_trace, SyntheticSpec};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Analysis = 5,
    Prediction = 6,
    Mutation = 7,
    Panic = 255,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsModelRole {
    RunTime = 0,
    Memory = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsSortKey {
    RunTime = 0,
    Memory = 1,
}

/// Location of the batch size literal inside a source buffer.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BsLiteralSpan {
    /// 1-based.
    pub line_number: u32,
    /// Byte offsets into the source, end exclusive.
    pub byte_start: usize,
    pub byte_end: usize,
    pub current_value: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsSyntheticSpec {
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

/// A fitted or hand-built linear model.
pub struct BsLinearModel(LinearModel);

/// A completed analysis of a replayed trace.
pub struct BsAnalysis(AnalysisResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: BsStatus,
    message: String,
}

impl Failure {
    fn new(status: BsStatus, message: impl ToString) -> Self {
        Failure {
            status,
            message: message.to_string(),
        }
    }

    fn null(name: &str) -> Self {
        Failure::new(BsStatus::NullPointer, format!("`{name}` is null"))
    }
}

fn set_last_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).expect("NULs replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BsStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            BsStatus::Ok
        }
        Ok(Err(failure)) => {
            set_last_error(failure.message);
            failure.status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            BsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::new(BsStatus::InvalidUtf8, format!("`{name}`: {e}")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(name))
}

fn check_out<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::null(name))
    } else {
        Ok(())
    }
}

fn into_c_string(text: String) -> Result<*mut c_char, Failure> {
    CString::new(text)
        .map(CString::into_raw)
        .map_err(|e| Failure::new(BsStatus::InvalidArgument, e))
}

/// Wire protocol version spoken by the daemon.
#[no_mangle]
pub extern "C" fn bs_protocol_version() -> u32 {
    PROTOCOL_VERSION
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn bs_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn role(r: BsModelRole) -> ModelRole {
    match r {
        BsModelRole::RunTime => ModelRole::RunTime,
        BsModelRole::Memory => ModelRole::Memory,
    }
}

/// Least squares fit of `values[i]` against `batches[i]`.
///
/// # Safety
/// `batches` and `values` must point to `len` readable elements. `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_linear_fit(
    batches: *const u32,
    values: *const f64,
    len: usize,
    model_role: BsModelRole,
    out: *mut *mut BsLinearModel,
) -> BsStatus {
    guard(|| {
        check_out(out, "out")?;
        let xs = slice_arg(batches, len, "batches")?;
        let ys = slice_arg(values, len, "values")?;
        let samples: Vec<(u32, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
        let model = fit_linear(&samples, role(model_role)).map_err(|e| Failure::new(BsStatus::Prediction, e))?;
        *out = Box::into_raw(Box::new(BsLinearModel(model)));
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_linear_model_new(
    slope: f64,
    intercept: f64,
    model_role: BsModelRole,
    out: *mut *mut BsLinearModel,
) -> BsStatus {
    guard(|| {
        check_out(out, "out")?;
        if !slope.is_finite() || !intercept.is_finite() {
            return Err(Failure::new(BsStatus::InvalidArgument, "coefficients must be finite"));
        }
        *out = Box::into_raw(Box::new(BsLinearModel(LinearModel::new(slope, intercept, role(model_role)))));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_linear_model_free(model: *mut BsLinearModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `slope` and `intercept` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_linear_model_coefficients(
    model: *const BsLinearModel,
    slope: *mut f64,
    intercept: *mut f64,
) -> BsStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        check_out(slope, "slope")?;
        check_out(intercept, "intercept")?;
        *slope = m.slope;
        *intercept = m.intercept;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_linear_model_eval(model: *const BsLinearModel, x: f64, out: *mut f64) -> BsStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        check_out(out, "out")?;
        *out = m.eval(x);
        Ok(())
    })
}

/// Asymptotic throughput `1000 / a` in samples/s for a run time model.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_max_throughput(model: *const BsLinearModel, out: *mut f64) -> BsStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        check_out(out, "out")?;
        *out = max_throughput(m).map_err(|e| Failure::new(BsStatus::Prediction, e))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_batch_from_throughput(
    model: *const BsLinearModel,
    samples_per_s: f64,
    out: *mut u32,
) -> BsStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        check_out(out, "out")?;
        *out = batch_from_throughput(m, samples_per_s).map_err(|e| Failure::new(BsStatus::Prediction, e))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_batch_from_memory(model: *const BsLinearModel, bytes: f64, out: *mut u32) -> BsStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        check_out(out, "out")?;
        *out = batch_from_memory(m, bytes).map_err(|e| Failure::new(BsStatus::Prediction, e))?;
        Ok(())
    })
}

/// Replays a trace file and analyzes it. `batch_size == 0` picks the smallest
/// batch in the trace; `capacity_bytes == 0` keeps the recorded capacity.
///
/// # Safety
/// `trace_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_analysis_from_trace(
    trace_path: *const c_char,
    batch_size: u32,
    capacity_bytes: u64,
    out: *mut *mut BsAnalysis,
) -> BsStatus {
    guard(|| {
        check_out(out, "out")?;
        let path = PathBuf::from(str_arg(trace_path, "trace_path")?);
        let options = AnalysisOptions {
            user_batch: (batch_size > 0).then_some(batch_size),
            capacity_override: (capacity_bytes > 0).then_some(capacity_bytes),
            ..AnalysisOptions::default()
        };
        let result = run_analysis(&ReplayBackend::new(path), &options).map_err(|e| {
            let status = if e.code() == "backend" {
                BsStatus::Io
            } else {
                BsStatus::Analysis
            };
            Failure::new(status, e)
        })?;
        *out = Box::into_raw(Box::new(BsAnalysis(result)));
        Ok(())
    })
}

/// # Safety
/// `analysis` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_analysis_free(analysis: *mut BsAnalysis) {
    if !analysis.is_null() {
        drop(Box::from_raw(analysis));
    }
}

/// Key metrics, fitted models and top-level breakdown as pretty JSON.
///
/// # Safety
/// `analysis` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_analysis_profile_json(analysis: *const BsAnalysis, out: *mut *mut c_char) -> BsStatus {
    guard(|| {
        let a = &ref_arg(analysis, "analysis")?.0;
        check_out(out, "out")?;
        *out = into_c_string(to_pretty_json(&profile_report(a)))?;
        Ok(())
    })
}

/// The subtree at `path` (child indices from the root, in `sort_key` order)
/// as a JSON array of nodes in pre-order.
///
/// # Safety
/// `analysis` must be a live handle; `path` must point to `path_len`
/// readable elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_analysis_breakdown_json(
    analysis: *const BsAnalysis,
    path: *const u32,
    path_len: usize,
    sort_key: BsSortKey,
    out: *mut *mut c_char,
) -> BsStatus {
    guard(|| {
        let a = &ref_arg(analysis, "analysis")?.0;
        check_out(out, "out")?;
        let path = NodePath(slice_arg(path, path_len, "path")?.iter().map(|&i| i as usize).collect());
        let key = match sort_key {
            BsSortKey::RunTime => SortKey::RunTime,
            BsSortKey::Memory => SortKey::Memory,
        };
        let nodes = breakdown_nodes(&a.tree, &path, key).map_err(|e| Failure::new(BsStatus::InvalidArgument, e))?;
        let text = serde_json::to_string(&nodes).map_err(|e| Failure::new(BsStatus::Analysis, e))?;
        *out = into_c_string(text)?;
        Ok(())
    })
}

/// Copies of the fitted run time and memory models. Fails with
/// `BS_STATUS_ANALYSIS` when fewer than three batches were measurable.
///
/// # Safety
/// `analysis` must be a live handle; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_analysis_models(
    analysis: *const BsAnalysis,
    run_time: *mut *mut BsLinearModel,
    memory: *mut *mut BsLinearModel,
) -> BsStatus {
    guard(|| {
        let a = &ref_arg(analysis, "analysis")?.0;
        check_out(run_time, "run_time")?;
        check_out(memory, "memory")?;
        let models = a
            .models
            .as_ref()
            .map_err(|reason| Failure::new(BsStatus::Analysis, format!("prediction disabled: {reason}")))?;
        *run_time = Box::into_raw(Box::new(BsLinearModel(models.run_time.clone())));
        *memory = Box::into_raw(Box::new(BsLinearModel(models.memory.clone())));
        Ok(())
    })
}

unsafe fn target_arg(provider: *const c_char, kwarg: *const c_char) -> Result<MutationTarget, Failure> {
    let default = MutationTarget::default();
    let provider = opt_str_arg(provider, "provider")?.map_or(default.provider_name, str::to_owned);
    let kwarg = opt_str_arg(kwarg, "kwarg")?.map_or(default.kwarg_name, str::to_owned);
    MutationTarget::new(provider, kwarg).map_err(|e| Failure::new(BsStatus::InvalidArgument, e))
}

/// Finds the integer default of `kwarg` in the definition of `provider`.
/// NULL names select `input_provider` / `batch_size`.
///
/// # Safety
/// String arguments must be NULL (where allowed) or NUL-terminated; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_locate_batch_literal(
    source: *const c_char,
    provider: *const c_char,
    kwarg: *const c_char,
    out: *mut BsLiteralSpan,
) -> BsStatus {
    guard(|| {
        check_out(out, "out")?;
        let source = str_arg(source, "source")?;
        let target = target_arg(provider, kwarg)?;
        let span = locate_batch_kwarg(source, &target).map_err(|e| Failure::new(BsStatus::Mutation, e))?;
        *out = BsLiteralSpan {
            line_number: span.line_number,
            byte_start: span.byte_start,
            byte_end: span.byte_end,
            current_value: span.current_value,
        };
        Ok(())
    })
}

/// Returns `source` with the literal at `span` replaced by `new_value`.
///
/// # Safety
/// `source` must be NUL-terminated; `span` must be readable; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn bs_apply_batch_size(
    source: *const c_char,
    span: *const BsLiteralSpan,
    new_value: u64,
    out: *mut *mut c_char,
) -> BsStatus {
    guard(|| {
        check_out(out, "out")?;
        let source = str_arg(source, "source")?;
        let s = ref_arg(span, "span")?;
        let span = LiteralSpan {
            line_number: s.line_number,
            byte_start: s.byte_start,
            byte_end: s.byte_end,
            current_value: s.current_value,
        };
        let updated = apply_batch_size(source, &span, new_value).map_err(|e| Failure::new(BsStatus::Mutation, e))?;
        *out = into_c_string(updated)?;
        Ok(())
    })
}

/// Writes a deterministic synthetic trace (JSON lines) for the given batch
/// sizes.
///
/// # Safety
/// `spec` must be readable; `batches` must point to `len` readable elements;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_generate_synthetic_trace(
    spec: *const BsSyntheticSpec,
    batches: *const u32,
    len: usize,
    out: *mut *mut c_char,
) -> BsStatus {
    guard(|| {
        check_out(out, "out")?;
        let s = ref_arg(spec, "spec")?;
        let batches = slice_arg(batches, len, "batches")?;
        let spec = SyntheticSpec {
            a_ms_per_sample: s.a_ms_per_sample,
            b_ms: s.b_ms,
            c_bytes_per_sample: s.c_bytes_per_sample,
            d_bytes: s.d_bytes,
            op_count: s.op_count,
            tree_depth: s.tree_depth,
            noise_fraction: s.noise_fraction,
            seed: s.seed,
            capacity_bytes: s.capacity_bytes,
        };
        let bytes = generate_synthetic_trace(&spec, batches).map_err(|e| Failure::new(BsStatus::InvalidArgument, e))?;
        let text = String::from_utf8(bytes).map_err(|e| Failure::new(BsStatus::InvalidUtf8, e))?;
        *out = into_c_string(text)?;
        Ok(())
    })
}
