//! C ABI over the pgt pipeline.
//!
//! Handles are opaque. Every fallible call returns a [`PgtStatus`]; on
//! failure the message is available from [`pgt_last_error_message`] on the
//! same thread until the next failing call. Strings returned through out
//! parameters belong to the caller and are released with
//! [`pgt_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pgt::calibrate::measure_ece;
use pgt::metrics::token_f1;
use pgt::pipeline::config::PipelineConfig;
use pgt::pipeline::Pipeline;
use pgt::PgtError;

/// Status codes; the nonzero values match the command-line exit codes
/// where both exist.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgtStatus {
    Ok = 0,
    InvalidArgument = 1,
    ConfigError = 2,
    PrerequisiteMissing = 3,
    RuntimeFailure = 4,
    Panic = 5,
}

/// An open work directory with its resolved configuration.
pub struct PgtPipeline {
    inner: Pipeline,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &PgtError) -> PgtStatus {
    match e {
        PgtError::Config(_) => PgtStatus::ConfigError,
        PgtError::Prerequisite { .. } | PgtError::Auth(_) => PgtStatus::PrerequisiteMissing,
        _ => PgtStatus::RuntimeFailure,
    }
}

enum Failure {
    Arg(String),
    Pgt(PgtError),
}

impl From<PgtError> for Failure {
    fn from(e: PgtError) -> Self {
        Failure::Pgt(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PgtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgtStatus::Ok,
        Ok(Err(Failure::Arg(m))) => {
            set_error(m);
            PgtStatus::InvalidArgument
        }
        Ok(Err(Failure::Pgt(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            PgtStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Arg(format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure::Arg("result contains a nul byte".into()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pgt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pgt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn pgt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opens (and locks) a work directory.
///
/// `config_path` may be null for built-in defaults. `workdir` may be null to
/// keep the configured one. `overrides` holds `n_overrides` `key=value`
/// strings.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `overrides` must point
/// to `n_overrides` valid strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgt_pipeline_open(
    config_path: *const c_char,
    workdir: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut PgtPipeline,
) -> PgtStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Arg("out is null".into()));
        }
        *out = ptr::null_mut();
        if overrides.is_null() && n_overrides > 0 {
            return Err(Failure::Arg("overrides is null".into()));
        }
        let mut sets = Vec::with_capacity(n_overrides);
        for i in 0..n_overrides {
            sets.push(str_arg(*overrides.add(i), "override")?.to_string());
        }
        let mut cfg = match opt_str_arg(config_path, "config_path")? {
            Some(p) => PipelineConfig::load(&PathBuf::from(p), &sets)?,
            None => PipelineConfig::from_toml("", &sets)?,
        };
        if let Some(w) = opt_str_arg(workdir, "workdir")? {
            cfg.global.work_dir = PathBuf::from(w);
        }
        let inner = Pipeline::open(cfg)?;
        *out = Box::into_raw(Box::new(PgtPipeline { inner }));
        Ok(())
    })
}

/// Closes a pipeline and releases its lock. Null is ignored.
///
/// # Safety
/// `p` must come from [`pgt_pipeline_open`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pgt_pipeline_free(p: *mut PgtPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Runs one phase by command name (`ingest`, `ict`, `seed`, ...). The
/// iteration is ignored by `ingest` and `ict`.
///
/// # Safety
/// `p` must be a live handle and `phase` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pgt_pipeline_run_phase(p: *mut PgtPipeline, phase: *const c_char, iteration: usize) -> PgtStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| Failure::Arg("pipeline is null".into()))?;
        let phase = str_arg(phase, "phase")?;
        p.inner.run_phase(phase, iteration)?;
        Ok(())
    })
}

/// Runs every phase in order.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgt_pipeline_run_all(p: *mut PgtPipeline) -> PgtStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| Failure::Arg("pipeline is null".into()))?;
        p.inner.run_all()?;
        Ok(())
    })
}

/// Answers `question` with the latest trained model (`iteration` 0) or the
/// given iteration. Writes a JSON object with `answer`, `evidence` and
/// `confidence` to `out`.
///
/// # Safety
/// `p` must be a live handle, `question` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgt_pipeline_answer(p: *const PgtPipeline, question: *const c_char, iteration: usize, out: *mut *mut c_char) -> PgtStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Arg("out is null".into()));
        }
        *out = ptr::null_mut();
        let p = p.as_ref().ok_or_else(|| Failure::Arg("pipeline is null".into()))?;
        let q = str_arg(question, "question")?;
        let a = p.inner.answer(q, (iteration > 0).then_some(iteration))?;
        out_string(out, serde_json::to_string(&a).map_err(PgtError::from)?)
    })
}

/// The run manifest as JSON.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgt_pipeline_manifest_json(p: *const PgtPipeline, out: *mut *mut c_char) -> PgtStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Arg("out is null".into()));
        }
        *out = ptr::null_mut();
        let p = p.as_ref().ok_or_else(|| Failure::Arg("pipeline is null".into()))?;
        out_string(out, serde_json::to_string(p.inner.manifest()).map_err(PgtError::from)?)
    })
}

/// Token-level F1 between two answers.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgt_token_f1(reference: *const c_char, candidate: *const c_char, out: *mut f64) -> PgtStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Arg("out is null".into()));
        }
        *out = token_f1(str_arg(reference, "reference")?, str_arg(candidate, "candidate")?);
        Ok(())
    })
}

/// Ten-bin expected calibration error of `n` (confidence, correct) pairs.
///
/// # Safety
/// `confidence` and `correct` must each hold `n` elements; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgt_expected_calibration_error(confidence: *const f64, correct: *const u8, n: usize, out: *mut f64) -> PgtStatus {
    guard(|| {
        if out.is_null() || confidence.is_null() || correct.is_null() {
            return Err(Failure::Arg("null pointer argument".into()));
        }
        let c = std::slice::from_raw_parts(confidence, n);
        let k = std::slice::from_raw_parts(correct, n);
        let items: Vec<(f64, bool)> = c.iter().zip(k).map(|(&c, &k)| (c, k != 0)).collect();
        *out = measure_ece(&items)?.ece;
        Ok(())
    })
}
