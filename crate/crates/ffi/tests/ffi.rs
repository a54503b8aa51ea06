use std::ffi::{CStr, CString};
use std::ptr;

use dmea_ffi::*;

fn last_error() -> String {
    let p = dmea_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_config(cache: &std::path::Path) -> CString {
    let json = serde_json::json!({
        "backbone": {
            "hidden_width": 16, "ffn_width": 32, "adapter_bottleneck": 4,
            "pretrain": { "steps": 10, "batch_size": 4, "corpus_size": 40 }
        },
        "expansion": { "epochs": 1, "batch_size": 8 },
        "adaptation": { "epochs": 1, "batch_size": 8 },
        "taskgen": { "train_size": 12, "valid_size": 4, "test_size": 4 },
        "harness": { "cache_dir": cache }
    });
    CString::new(json.to_string()).unwrap()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(dmea_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        assert_eq!(dmea_default_config(ptr::null_mut()), DmeaStatus::NullArgument);
        assert!(last_error().contains("out_json"));
        let mut n = 0usize;
        assert_eq!(dmea_run_num_tasks(ptr::null(), &mut n), DmeaStatus::NullArgument);
        let mut out = ptr::null_mut();
        let method = CString::new("dmea").unwrap();
        let status = dmea_run_lifelong(ptr::null(), ptr::null(), 1, method.as_ptr(), 0, ptr::null(), &mut out);
        assert_eq!(status, DmeaStatus::NullArgument);
        assert!(out.is_null());
        // freeing null is a no-op
        dmea_run_free(ptr::null_mut());
        dmea_backbone_free(ptr::null_mut());
        dmea_string_free(ptr::null_mut());
    }
}

#[test]
fn success_clears_the_last_error() {
    unsafe {
        assert_eq!(dmea_default_config(ptr::null_mut()), DmeaStatus::NullArgument);
        let mut s = ptr::null_mut();
        assert_eq!(dmea_default_config(&mut s), DmeaStatus::Ok);
        assert!(dmea_last_error().is_null());
        let json: serde_json::Value = serde_json::from_str(CStr::from_ptr(s).to_str().unwrap()).unwrap();
        assert!(json.get("adaptation").is_some());
        dmea_string_free(s);
    }
}

#[test]
fn bad_config_is_a_config_error() {
    unsafe {
        let mut out = ptr::null_mut();
        let bad = CString::new("{\"adaptation\": {\"epochs\": \"many\"}}").unwrap();
        assert_eq!(dmea_backbone_load(bad.as_ptr(), &mut out), DmeaStatus::Config);
        assert!(out.is_null());
        let not_json = CString::new("{").unwrap();
        assert_eq!(dmea_backbone_load(not_json.as_ptr(), &mut out), DmeaStatus::Config);
    }
}

#[test]
fn fkt_matches_hand_computation() {
    let diag = [80.0, 60.0, 90.0];
    let alone = [70.0, 65.0, 80.0];
    let mut out = 0.0;
    unsafe {
        assert_eq!(dmea_fkt(diag.as_ptr(), alone.as_ptr(), 3, 3, &mut out), DmeaStatus::Ok);
    }
    // first task carries no transfer
    assert!((out - ((-5.0 + 10.0) / 2.0)).abs() < 1e-12);
    unsafe {
        assert_eq!(dmea_fkt(diag.as_ptr(), alone.as_ptr(), 3, 9, &mut out), DmeaStatus::InvalidArgument);
        assert_eq!(dmea_fkt(ptr::null(), alone.as_ptr(), 3, 2, &mut out), DmeaStatus::NullArgument);
    }
}

#[test]
fn gradient_scale_at_known_point() {
    let eta = dmea_gradient_scale(2.0, 1.0, 1);
    assert!((eta - (1.0 + (-1.0f64).exp())).abs() < 1e-12);
}

#[test]
fn selftest_passes() {
    let mut failed = u32::MAX;
    unsafe {
        assert_eq!(dmea_selftest(&mut failed), DmeaStatus::Ok);
    }
    assert_eq!(failed, 0);
}

#[test]
fn tiny_run_through_the_c_interface() {
    let cache = tempfile::tempdir().unwrap();
    let cfg = tiny_config(cache.path());
    unsafe {
        let mut backbone = ptr::null_mut();
        assert_eq!(dmea_backbone_load(cfg.as_ptr(), &mut backbone), DmeaStatus::Ok, "{:?}", dmea_last_error());

        let suite = CString::new("similar").unwrap();
        let method = CString::new("dmea").unwrap();
        let mut run = ptr::null_mut();
        let status = dmea_run_lifelong(backbone, suite.as_ptr(), 1, method.as_ptr(), 3, cfg.as_ptr(), &mut run);
        assert_eq!(status, DmeaStatus::Ok, "{}", last_error());

        let mut n = 0usize;
        assert_eq!(dmea_run_num_tasks(run, &mut n), DmeaStatus::Ok);
        assert_eq!(n, 5);
        let mut score = -1.0;
        assert_eq!(dmea_run_score(run, n - 1, 0, &mut score), DmeaStatus::Ok);
        assert!((0.0..=100.0).contains(&score));
        assert_eq!(dmea_run_score(run, 0, 1, &mut score), DmeaStatus::InvalidArgument);
        let mut avg = -1.0;
        assert_eq!(dmea_run_final_average(run, &mut avg), DmeaStatus::Ok);
        assert!((0.0..=100.0).contains(&avg));

        let mut json = ptr::null_mut();
        assert_eq!(dmea_run_summary_json(run, &mut json), DmeaStatus::Ok);
        let summary: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(summary["method"], "dmea");
        dmea_string_free(json);

        let out = tempfile::tempdir().unwrap();
        let dir = CString::new(out.path().to_str().unwrap()).unwrap();
        assert_eq!(dmea_run_write(run, dir.as_ptr()), DmeaStatus::Ok, "{}", last_error());
        assert!(out.path().join("summary.json").exists());

        let unknown = CString::new("nope").unwrap();
        let mut other = ptr::null_mut();
        let status = dmea_run_lifelong(backbone, suite.as_ptr(), 1, unknown.as_ptr(), 3, cfg.as_ptr(), &mut other);
        assert_eq!(status, DmeaStatus::Config);
        assert!(last_error().contains("nope"));

        dmea_run_free(run);
        dmea_backbone_free(backbone);
    }
}

#[test]
fn generated_header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dmea.h")).unwrap();
    for name in ["dmea_run_lifelong", "dmea_last_error", "DMEA_STATUS_NULL_ARGUMENT", "typedef struct DmeaRun DmeaRun"] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
