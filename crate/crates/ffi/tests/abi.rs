use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use batchscope_ffi::*;
use libc::c_char;

fn last_error() -> String {
    let p = bs_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take_string(p: *mut c_char) -> String {
    assert!(!p.is_null());
    let s = CStr::from_ptr(p).to_str().unwrap().to_owned();
    bs_string_free(p);
    s
}

fn spec() -> BsSyntheticSpec {
    BsSyntheticSpec {
        a_ms_per_sample: 1.0,
        b_ms: 2.0,
        c_bytes_per_sample: 1 << 20,
        d_bytes: 1 << 28,
        op_count: 6,
        tree_depth: 2,
        noise_fraction: 0.0,
        seed: 5,
        capacity_bytes: 1 << 33,
    }
}

#[test]
fn protocol_version_is_one() {
    assert_eq!(bs_protocol_version(), 1);
}

#[test]
fn fit_and_invert() {
    let batches = [8u32, 12, 16];
    let values: Vec<f64> = batches.iter().map(|&x| f64::from(x) + 2.0).collect();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(
            bs_linear_fit(batches.as_ptr(), values.as_ptr(), 3, BsModelRole::RunTime, &mut model),
            BsStatus::Ok
        );
        let (mut a, mut b) = (0.0, 0.0);
        assert_eq!(bs_linear_model_coefficients(model, &mut a, &mut b), BsStatus::Ok);
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);

        let mut y = 0.0;
        assert_eq!(bs_linear_model_eval(model, 10.0, &mut y), BsStatus::Ok);
        assert!((y - 12.0).abs() < 1e-12);

        let mut max = 0.0;
        assert_eq!(bs_max_throughput(model, &mut max), BsStatus::Ok);
        assert!((max - 1000.0).abs() < 1e-9);

        let mut batch = 0u32;
        assert_eq!(bs_batch_from_throughput(model, 800.0, &mut batch), BsStatus::Ok);
        assert_eq!(batch, 8);
        assert_eq!(bs_batch_from_throughput(model, 1000.0, &mut batch), BsStatus::Prediction);
        assert!(!last_error().is_empty());
        bs_linear_model_free(model);
    }
}

#[test]
fn memory_inverse_through_handle() {
    let mut model = ptr::null_mut();
    unsafe {
        let gib = (1u64 << 30) as f64;
        assert_eq!(
            bs_linear_model_new(0.0625 * gib, 0.5 * gib, BsModelRole::Memory, &mut model),
            BsStatus::Ok
        );
        let mut batch = 0u32;
        assert_eq!(bs_batch_from_memory(model, 8.0 * gib, &mut batch), BsStatus::Ok);
        assert_eq!(batch, 120);
        bs_linear_model_free(model);
    }
}

#[test]
fn null_arguments_are_rejected() {
    unsafe {
        assert_eq!(
            bs_linear_fit(ptr::null(), ptr::null(), 3, BsModelRole::RunTime, ptr::null_mut()),
            BsStatus::NullPointer
        );
        assert!(last_error().contains("out"));
        let mut y = 0.0;
        assert_eq!(bs_linear_model_eval(ptr::null(), 1.0, &mut y), BsStatus::NullPointer);
        bs_linear_model_free(ptr::null_mut());
        bs_analysis_free(ptr::null_mut());
        bs_string_free(ptr::null_mut());
    }
}

#[test]
fn success_clears_last_error() {
    unsafe {
        let mut y = 0.0;
        assert_eq!(bs_linear_model_eval(ptr::null(), 1.0, &mut y), BsStatus::NullPointer);
        let mut model = ptr::null_mut();
        assert_eq!(bs_linear_model_new(1.0, 1.0, BsModelRole::RunTime, &mut model), BsStatus::Ok);
        assert!(bs_last_error().is_null());
        bs_linear_model_free(model);
    }
}

#[test]
fn mutation_round_trip() {
    let source = CString::new("def input_provider(batch_size=32):\n    return batch_size\n").unwrap();
    unsafe {
        let mut span = BsLiteralSpan {
            line_number: 0,
            byte_start: 0,
            byte_end: 0,
            current_value: 0,
        };
        assert_eq!(
            bs_locate_batch_literal(source.as_ptr(), ptr::null(), ptr::null(), &mut span),
            BsStatus::Ok
        );
        assert_eq!(span.line_number, 1);
        assert_eq!(span.current_value, 32);

        let mut out = ptr::null_mut();
        assert_eq!(bs_apply_batch_size(source.as_ptr(), &span, 48, &mut out), BsStatus::Ok);
        assert_eq!(take_string(out), "def input_provider(batch_size=48):\n    return batch_size\n");

        let bad = CString::new("def input_provider(batch_size=N):\n    pass\n").unwrap();
        assert_eq!(
            bs_locate_batch_literal(bad.as_ptr(), ptr::null(), ptr::null(), &mut span),
            BsStatus::Mutation
        );
        assert!(last_error().contains("non-literal default"));
    }
}

#[test]
fn custom_mutation_target() {
    let source = CString::new("def data(bs=7):\n    pass\n").unwrap();
    let provider = CString::new("data").unwrap();
    let kwarg = CString::new("bs").unwrap();
    let mut span = BsLiteralSpan {
        line_number: 0,
        byte_start: 0,
        byte_end: 0,
        current_value: 0,
    };
    unsafe {
        assert_eq!(
            bs_locate_batch_literal(source.as_ptr(), provider.as_ptr(), kwarg.as_ptr(), &mut span),
            BsStatus::Ok
        );
    }
    assert_eq!(span.current_value, 7);
}

#[test]
fn synthetic_trace_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let batches = [8u32, 12, 16];
    unsafe {
        let mut text = ptr::null_mut();
        assert_eq!(
            bs_generate_synthetic_trace(&spec(), batches.as_ptr(), batches.len(), &mut text),
            BsStatus::Ok
        );
        std::fs::write(&path, take_string(text)).unwrap();

        let c_path = CString::new(path.to_str().unwrap()).unwrap();
        let mut analysis = ptr::null_mut();
        assert_eq!(bs_analysis_from_trace(c_path.as_ptr(), 8, 0, &mut analysis), BsStatus::Ok);

        let mut json = ptr::null_mut();
        assert_eq!(bs_analysis_profile_json(analysis, &mut json), BsStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
        assert_eq!(report["batch_size"], 8);
        assert_eq!(report["sampled_batches"], serde_json::json!([8, 12, 16]));

        assert_eq!(
            bs_analysis_breakdown_json(analysis, ptr::null(), 0, BsSortKey::RunTime, &mut json),
            BsStatus::Ok
        );
        let nodes: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
        let leaves = nodes
            .as_array()
            .unwrap()
            .iter()
            .filter(|n| n["kind"] == "operation")
            .count();
        assert_eq!(leaves, 6);

        let bad_path = [99u32];
        assert_eq!(
            bs_analysis_breakdown_json(analysis, bad_path.as_ptr(), 1, BsSortKey::Memory, &mut json),
            BsStatus::InvalidArgument
        );

        let (mut rt, mut mem) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(bs_analysis_models(analysis, &mut rt, &mut mem), BsStatus::Ok);
        let (mut a, mut b) = (0.0, 0.0);
        bs_linear_model_coefficients(rt, &mut a, &mut b);
        assert!((a - 1.0).abs() <= 1e-9 && (b - 2.0).abs() <= 1e-9);
        bs_linear_model_coefficients(mem, &mut a, &mut b);
        assert!((a - (1u64 << 20) as f64).abs() <= 1e-9 * a);
        bs_linear_model_free(rt);
        bs_linear_model_free(mem);
        bs_analysis_free(analysis);
    }
}

#[test]
fn missing_trace_is_an_io_error() {
    let path = CString::new("/nonexistent/trace.jsonl").unwrap();
    let mut analysis = ptr::null_mut();
    unsafe {
        assert_eq!(bs_analysis_from_trace(path.as_ptr(), 0, 0, &mut analysis), BsStatus::Io);
    }
    assert!(analysis.is_null());
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/batchscope.h")).unwrap();
    for name in [
        "bs_protocol_version",
        "bs_last_error",
        "bs_string_free",
        "bs_linear_fit",
        "bs_linear_model_new",
        "bs_linear_model_free",
        "bs_linear_model_coefficients",
        "bs_linear_model_eval",
        "bs_max_throughput",
        "bs_batch_from_throughput",
        "bs_batch_from_memory",
        "bs_analysis_from_trace",
        "bs_analysis_free",
        "bs_analysis_profile_json",
        "bs_analysis_breakdown_json",
        "bs_analysis_models",
        "bs_locate_batch_literal",
        "bs_apply_batch_size",
        "bs_generate_synthetic_trace",
        "typedef struct BsAnalysis BsAnalysis",
        "typedef struct BsLinearModel BsLinearModel",
        "BS_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "header is missing {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler, skipping");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "batchscope.h"
int main(void) {
    BsLinearModel *m = NULL;
    uint32_t batch = 0;
    if (bs_linear_model_new(1.0, 2.0, BS_MODEL_ROLE_RUN_TIME, &m) != BS_STATUS_OK) return 1;
    if (bs_batch_from_throughput(m, 800.0, &batch) != BS_STATUS_OK) return 2;
    bs_linear_model_free(m);
    return batch == 8 ? 0 : 3;
}
"#,
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-c", "-o"])
        .arg(dir.path().join("use.o"))
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}
