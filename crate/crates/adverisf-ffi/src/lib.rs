//! C ABI surface over the adverisf library: opaque handles for configs and
//! run results, integer status codes matching the CLI's exit codes, and a
//! thread-local last-error message.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use adverisf::config::{load_config, parse_config, ExperimentConfig, ModelKind};
use adverisf::error::AdvError;
use adverisf::pipeline::{
    train_adverisf, train_baseline_mlp, train_baseline_vib, AblationVariant,
};
use adverisf::record::RunRecord;

/// Status codes returned by every fallible function. Values match the CLI
/// exit codes.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum AdvStatus {
    Ok = 0,
    Error = 1,
    ConfigError = 2,
    DatasetError = 3,
    Diverged = 4,
    NullArgument = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &AdvError) -> AdvStatus {
    match err {
        AdvError::Config(_) => AdvStatus::ConfigError,
        AdvError::Dataset(_) => AdvStatus::DatasetError,
        AdvError::Diverged(_) => AdvStatus::Diverged,
        _ => AdvStatus::Error,
    }
}

fn fail(err: AdvError) -> AdvStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

/// Opaque parsed experiment configuration.
pub struct AdvConfig {
    inner: ExperimentConfig,
}

/// Opaque result of training one seed.
pub struct AdvRunResult {
    record: RunRecord,
}

unsafe fn cstr<'a>(p: *const c_char) -> Option<&'a str> {
    if p.is_null() {
        return None;
    }
    unsafe { CStr::from_ptr(p) }.to_str().ok()
}

/// Message for the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn adv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        Some(c) => c.as_ptr(),
        None => ptr::null(),
    })
}

/// Parses a configuration file. On success writes a handle the caller must
/// release with `adv_config_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn adv_config_load(
    path: *const c_char,
    out: *mut *mut AdvConfig,
) -> AdvStatus {
    clear_error();
    if out.is_null() {
        return AdvStatus::NullArgument;
    }
    let Some(path) = (unsafe { cstr(path) }) else {
        set_error("path is null or not UTF-8".into());
        return AdvStatus::NullArgument;
    };
    match load_config(Path::new(path)) {
        Ok(cfg) => {
            unsafe { *out = Box::into_raw(Box::new(AdvConfig { inner: cfg })) };
            AdvStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Parses configuration text. Same ownership contract as `adv_config_load`.
///
/// # Safety
/// `text` must be a valid NUL-terminated string; `out` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn adv_config_parse(
    text: *const c_char,
    out: *mut *mut AdvConfig,
) -> AdvStatus {
    clear_error();
    if out.is_null() {
        return AdvStatus::NullArgument;
    }
    let Some(text) = (unsafe { cstr(text) }) else {
        set_error("text is null or not UTF-8".into());
        return AdvStatus::NullArgument;
    };
    match parse_config(text) {
        Ok(cfg) => {
            unsafe { *out = Box::into_raw(Box::new(AdvConfig { inner: cfg })) };
            AdvStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Releases a configuration handle. NULL is allowed.
///
/// # Safety
/// `config` must be a handle returned by this library, released once.
#[no_mangle]
pub unsafe extern "C" fn adv_config_free(config: *mut AdvConfig) {
    if !config.is_null() {
        drop(unsafe { Box::from_raw(config) });
    }
}

/// Trains the configured model for one seed. `variant` selects an ablation
/// ("A0".."A3"); NULL means A0 and is ignored for baseline models. On
/// success writes a result handle the caller must release with
/// `adv_result_free`.
///
/// # Safety
/// `config` must be a live handle from this library; `out` must be valid;
/// `variant` must be NULL or a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn adv_run_seed(
    config: *const AdvConfig,
    seed: u64,
    variant: *const c_char,
    out: *mut *mut AdvRunResult,
) -> AdvStatus {
    clear_error();
    if config.is_null() || out.is_null() {
        return AdvStatus::NullArgument;
    }
    let cfg = unsafe { &(*config).inner };
    let variant = match unsafe { cstr(variant) } {
        None => AblationVariant::A0,
        Some(v) => match AblationVariant::parse(v) {
            Ok(v) => v,
            Err(e) => return fail(e),
        },
    };
    let record = (|| -> Result<RunRecord, AdvError> {
        let data = cfg.load_dataset()?;
        let n = data.n_features();
        match cfg.model_kind {
            ModelKind::Adverisf => {
                let model = cfg.build_model(n)?;
                Ok(train_adverisf(&model, &data, &cfg.schedule, variant, seed, &cfg.hash)?.record)
            }
            ModelKind::Mlp => {
                let spec = cfg.build_mlp(n);
                Ok(train_baseline_mlp(&spec, &data, &cfg.schedule, seed, &cfg.hash)?.1)
            }
            ModelKind::Vib => {
                let spec = cfg.build_vib(n);
                Ok(train_baseline_vib(&spec, &data, &cfg.schedule, seed, &cfg.hash)?.1)
            }
        }
    })();
    match record {
        Ok(record) => {
            unsafe { *out = Box::into_raw(Box::new(AdvRunResult { record })) };
            AdvStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Training-set R-squared of a finished run.
///
/// # Safety
/// `result` must be a live handle from `adv_run_seed`.
#[no_mangle]
pub unsafe extern "C" fn adv_result_train_r2(result: *const AdvRunResult) -> f64 {
    if result.is_null() {
        return f64::NAN;
    }
    unsafe { &*result }.record.train_r2
}

/// Validation-set R-squared of a finished run.
///
/// # Safety
/// `result` must be a live handle from `adv_run_seed`.
#[no_mangle]
pub unsafe extern "C" fn adv_result_valid_r2(result: *const AdvRunResult) -> f64 {
    if result.is_null() {
        return f64::NAN;
    }
    unsafe { &*result }.record.valid_r2
}

/// Test-set R-squared of a finished run.
///
/// # Safety
/// `result` must be a live handle from `adv_run_seed`.
#[no_mangle]
pub unsafe extern "C" fn adv_result_test_r2(result: *const AdvRunResult) -> f64 {
    if result.is_null() {
        return f64::NAN;
    }
    unsafe { &*result }.record.test_r2
}

/// Number of critic computation graphs built during the run (0 under the A3
/// ablation).
///
/// # Safety
/// `result` must be a live handle from `adv_run_seed`.
#[no_mangle]
pub unsafe extern "C" fn adv_result_critic_graph_builds(result: *const AdvRunResult) -> u64 {
    if result.is_null() {
        return 0;
    }
    unsafe { &*result }.record.critic_graph_builds
}

/// Serializes the run record as JSON. The returned string must be released
/// with `adv_string_free`; NULL on failure.
///
/// # Safety
/// `result` must be a live handle from `adv_run_seed`.
#[no_mangle]
pub unsafe extern "C" fn adv_result_to_json(result: *const AdvRunResult) -> *mut c_char {
    if result.is_null() {
        return ptr::null_mut();
    }
    let record = &unsafe { &*result }.record;
    match serde_json::to_string(record) {
        Ok(json) => match CString::new(json) {
            Ok(c) => c.into_raw(),
            Err(_) => ptr::null_mut(),
        },
        Err(_) => ptr::null_mut(),
    }
}

/// Releases a string returned by `adv_result_to_json`. NULL is allowed.
///
/// # Safety
/// `s` must come from this library, released once.
#[no_mangle]
pub unsafe extern "C" fn adv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Releases a run-result handle. NULL is allowed.
///
/// # Safety
/// `result` must be a handle returned by this library, released once.
#[no_mangle]
pub unsafe extern "C" fn adv_result_free(result: *mut AdvRunResult) {
    if !result.is_null() {
        drop(unsafe { Box::from_raw(result) });
    }
}
