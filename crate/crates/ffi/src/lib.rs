//! C interface to the lifelong-learning core.
//!
//! Every function returns a [`DmeaStatus`]; on failure a message is kept per
//! thread and can be read with [`dmea_last_error`]. Handles are opaque and
//! must be released with their `_free` function. Strings returned by the
//! library are released with [`dmea_string_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dmea::adaptation::gradient_scale;
use dmea::harness::config::{load_or_pretrain, Method, RunConfig};
use dmea::harness::lifelong::{run_lifelong, LifelongRun};
use dmea::harness::metrics::fkt;
use dmea::harness::report::{write_run, RunSummary};
use dmea::harness::selftest::run_selftest;
use dmea::model::ModelState;
use dmea::taskgen::{make_suite, SuiteKind};
use dmea::DmeaError;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmeaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    InvalidState = 3,
    Config = 4,
    Io = 5,
    TrainingFailure = 6,
    NumericalFailure = 7,
    Panic = 8,
}

/// A frozen pretrained backbone.
pub struct DmeaBackbone {
    state: ModelState,
}

/// A finished lifelong run.
pub struct DmeaRun {
    run: LifelongRun,
    summary: RunSummary,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &DmeaError) -> DmeaStatus {
    match e {
        DmeaError::InvalidInput(_) | DmeaError::InvalidSample(_) | DmeaError::Routing(_) => DmeaStatus::InvalidArgument,
        DmeaError::InvalidState(_) | DmeaError::OracleFailure(_) => DmeaStatus::InvalidState,
        DmeaError::Config(_) | DmeaError::Json(_) => DmeaStatus::Config,
        DmeaError::Io(_) | DmeaError::Checkpoint(_) => DmeaStatus::Io,
        DmeaError::TrainingFailure(_) => DmeaStatus::TrainingFailure,
        DmeaError::NumericalFailure(_) => DmeaStatus::NumericalFailure,
        DmeaError::StageFailure { source, .. } => status_of(source),
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (DmeaStatus, String)>) -> DmeaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DmeaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DmeaStatus::Panic
        }
    }
}

fn core<T>(r: dmea::Result<T>) -> Result<T, (DmeaStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (DmeaStatus, String) {
    (DmeaStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (DmeaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DmeaStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn config(p: *const c_char) -> Result<RunConfig, (DmeaStatus, String)> {
    if p.is_null() {
        return Ok(RunConfig::default());
    }
    let s = text(p, "config_json")?;
    let cfg: RunConfig = serde_json::from_str(s).map_err(|e| (DmeaStatus::Config, e.to_string()))?;
    core(cfg.validate())?;
    Ok(cfg)
}

fn to_c(s: String) -> Result<*mut c_char, (DmeaStatus, String)> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| (DmeaStatus::InvalidState, "string contains NUL".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dmea_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dmea_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn dmea_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// The default configuration as JSON.
#[no_mangle]
pub unsafe extern "C" fn dmea_default_config(out_json: *mut *mut c_char) -> DmeaStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let s = serde_json::to_string_pretty(&RunConfig::default()).map_err(|e| (DmeaStatus::Config, e.to_string()))?;
        *out_json = to_c(s)?;
        Ok(())
    })
}

/// Loads the cached backbone for `config_json` (NULL for defaults), pretraining it if needed.
#[no_mangle]
pub unsafe extern "C" fn dmea_backbone_load(config_json: *const c_char, out: *mut *mut DmeaBackbone) -> DmeaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = config(config_json)?;
        let state = core(load_or_pretrain(&cfg.backbone, &cfg.harness))?;
        *out = Box::into_raw(Box::new(DmeaBackbone { state }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dmea_backbone_free(backbone: *mut DmeaBackbone) {
    if !backbone.is_null() {
        drop(Box::from_raw(backbone));
    }
}

/// Runs `method` over task order `order` of `suite` ("similar", "random" or "long").
#[no_mangle]
pub unsafe extern "C" fn dmea_run_lifelong(
    backbone: *const DmeaBackbone,
    suite: *const c_char,
    order: u32,
    method: *const c_char,
    seed: u64,
    config_json: *const c_char,
    out: *mut *mut DmeaRun,
) -> DmeaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let backbone = backbone.as_ref().ok_or_else(|| null("backbone"))?;
        let kind: SuiteKind = core(text(suite, "suite")?.parse())?;
        let method: Method = core(text(method, "method")?.parse())?;
        let cfg = config(config_json)?;
        let s = make_suite(kind, seed, &cfg.taskgen);
        let task_order = core(s.order(order as usize))?;
        let run = core(run_lifelong(&backbone.state, &s, &task_order, method, &cfg, seed))?;
        let summary = core(RunSummary::from_run(&run, kind, None))?;
        *out = Box::into_raw(Box::new(DmeaRun { run, summary }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dmea_run_free(run: *mut DmeaRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of tasks learned in the run.
#[no_mangle]
pub unsafe extern "C" fn dmea_run_num_tasks(run: *const DmeaRun, out: *mut usize) -> DmeaStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = run.summary.order.len();
        Ok(())
    })
}

/// Exact-match score of task `j` after learning task `i` (0-based, `j <= i`).
#[no_mangle]
pub unsafe extern "C" fn dmea_run_score(run: *const DmeaRun, i: usize, j: usize, out: *mut f64) -> DmeaStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let n = run.summary.order.len();
        if i >= n || j > i {
            return Err((DmeaStatus::InvalidArgument, format!("score ({i}, {j}) outside the {n}-task triangle")));
        }
        *out = run.summary.exact_match[i][j];
        Ok(())
    })
}

/// Mean exact match over all tasks after the last step.
#[no_mangle]
pub unsafe extern "C" fn dmea_run_final_average(run: *const DmeaRun, out: *mut f64) -> DmeaStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = run.summary.final_average;
        Ok(())
    })
}

/// The run summary as JSON; release with [`dmea_string_free`].
#[no_mangle]
pub unsafe extern "C" fn dmea_run_summary_json(run: *const DmeaRun, out_json: *mut *mut c_char) -> DmeaStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let s = serde_json::to_string(&run.summary).map_err(|e| (DmeaStatus::Config, e.to_string()))?;
        *out_json = to_c(s)?;
        Ok(())
    })
}

/// Writes the run's files (summary, results, traces, plots) under `dir`.
#[no_mangle]
pub unsafe extern "C" fn dmea_run_write(run: *const DmeaRun, dir: *const c_char) -> DmeaStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let dir = text(dir, "dir")?;
        core(write_run(Path::new(dir), &run.run, &run.summary))
    })
}

/// Forward transfer at 1-based step `t` from `len` diagonal and standalone scores.
#[no_mangle]
pub unsafe extern "C" fn dmea_fkt(
    diagonal: *const f64,
    standalone: *const f64,
    len: usize,
    t: usize,
    out: *mut f64,
) -> DmeaStatus {
    guard(|| {
        if diagonal.is_null() || standalone.is_null() {
            return Err(null("scores"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = std::slice::from_raw_parts(diagonal, len);
        let s = std::slice::from_raw_parts(standalone, len);
        *out = core(fkt(d, s, t))?;
        Ok(())
    })
}

/// Replay loss scale after `t` completed epochs for the given gradient norms.
#[no_mangle]
pub extern "C" fn dmea_gradient_scale(g_new_norm: f64, g_old_norm: f64, t: u32) -> f64 {
    gradient_scale(g_new_norm, g_old_norm, t as usize)
}

/// Runs the built-in invariant checks; `out_failed` receives the failure count.
#[no_mangle]
pub unsafe extern "C" fn dmea_selftest(out_failed: *mut u32) -> DmeaStatus {
    guard(|| {
        let out = out_failed.as_mut().ok_or_else(|| null("out_failed"))?;
        *out = run_selftest().iter().filter(|c| !c.passed).count() as u32;
        Ok(())
    })
}
