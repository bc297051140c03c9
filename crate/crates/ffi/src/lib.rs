//! C ABI over the `ccmplus` library.
//!
//! Every fallible function returns a [`CcmplusStatus`]; on failure the
//! message is available from [`ccmplus_last_error_message`] on the same
//! thread. Panels and models are opaque handles released with their `_free`
//! function. Output buffers are caller-allocated.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ccmplus::ccm::{ccm_matrix, convergence_scan, cross_map_skill};
use ccmplus::checkpoint::Checkpoint;
use ccmplus::cli::{eval_checkpoint_on_panel, RunConfig};
use ccmplus::data::{load_trace, TrafficPanel};
use ccmplus::{DenseArray, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcmplusStatus {
    Ok = 0,
    NullPointer = 1,
    Argument = 2,
    Shape = 3,
    Io = 4,
    Parse = 5,
    Config = 6,
    Checkpoint = 7,
    Numeric = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A loaded traffic panel.
pub struct CcmplusPanel {
    inner: TrafficPanel,
}

/// A trained forecaster with its stored causal matrix.
pub struct CcmplusModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> CcmplusStatus {
    match err {
        Error::Shape(_) => CcmplusStatus::Shape,
        Error::Argument(_) | Error::Precondition(_) => CcmplusStatus::Argument,
        Error::NonFinite(_) | Error::Divergence { .. } => CcmplusStatus::Numeric,
        Error::Config(_) | Error::ManifoldSkipped { .. } => CcmplusStatus::Config,
        Error::Io { .. } => CcmplusStatus::Io,
        Error::Parse { .. } => CcmplusStatus::Parse,
        Error::Checkpoint(_) => CcmplusStatus::Checkpoint,
    }
}

enum Failure {
    Lib(Error),
    Status(CcmplusStatus, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CcmplusStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CcmplusStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            CcmplusStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(CcmplusStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::Status(CcmplusStatus::Argument, "path is not UTF-8".into()))
}

fn copy_out(src: &[f64], out: *mut f64, capacity: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if capacity < src.len() {
        return Err(Failure::Status(
            CcmplusStatus::BufferTooSmall,
            format!("output needs {} values, buffer holds {capacity}", src.len()),
        ));
    }
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), out, src.len()) };
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ccmplus_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Cross-map skill of `x`'s shadow manifold estimating `y`.
///
/// # Safety
/// `x` and `y` must point to `len` readable doubles; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_cross_map_skill(
    x: *const f64,
    y: *const f64,
    len: usize,
    dim: usize,
    tau: usize,
    out_skill: *mut f64,
    out_degenerate: *mut bool,
) -> CcmplusStatus {
    guard(|| {
        let (x, y) = (slice(x, len, "x")?, slice(y, len, "y")?);
        if out_skill.is_null() {
            return Err(null("out_skill"));
        }
        let r = cross_map_skill(x, y, dim, tau)?;
        *out_skill = r.skill;
        if !out_degenerate.is_null() {
            *out_degenerate = r.degenerate;
        }
        Ok(())
    })
}

/// Skill on each prefix length in `lengths`, written to `out_skills`.
///
/// # Safety
/// `x`, `y` hold `len` doubles; `lengths` and `out_skills` hold `n_lengths` items.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_convergence_scan(
    x: *const f64,
    y: *const f64,
    len: usize,
    dim: usize,
    tau: usize,
    lengths: *const usize,
    n_lengths: usize,
    out_skills: *mut f64,
) -> CcmplusStatus {
    guard(|| {
        let (x, y) = (slice(x, len, "x")?, slice(y, len, "y")?);
        let lengths = slice(lengths, n_lengths, "lengths")?;
        let results = convergence_scan(x, y, dim, tau, lengths)?;
        let skills: Vec<f64> = results.iter().map(|r| r.skill).collect();
        copy_out(&skills, out_skills, n_lengths)
    })
}

/// Loads a trace file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_panel_load(path: *const c_char, out: *mut *mut CcmplusPanel) -> CcmplusStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let panel = load_trace(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CcmplusPanel { inner: panel }));
        Ok(())
    })
}

/// Builds a panel from row-major `n_services x len` values. Services are named
/// `svc-0`, `svc-1`, ...
///
/// # Safety
/// `values` holds `n_services * len` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_panel_from_values(
    values: *const f64,
    n_services: usize,
    len: usize,
    start_time: i64,
    granularity: u64,
    out: *mut *mut CcmplusPanel,
) -> CcmplusStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let count = n_services
            .checked_mul(len)
            .ok_or_else(|| Failure::Status(CcmplusStatus::Argument, "panel size overflows".into()))?;
        let data = slice(values, count, "values")?.to_vec();
        let ids = (0..n_services).map(|i| format!("svc-{i}")).collect();
        let panel = TrafficPanel::new(ids, start_time, granularity, DenseArray::new(&[n_services, len], data)?)?;
        *out = Box::into_raw(Box::new(CcmplusPanel { inner: panel }));
        Ok(())
    })
}

/// # Safety
/// `panel` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_panel_free(panel: *mut CcmplusPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Number of services, or 0 for a null handle.
///
/// # Safety
/// `panel` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_panel_services(panel: *const CcmplusPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.inner.n_services())
}

/// Number of buckets, or 0 for a null handle.
///
/// # Safety
/// `panel` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_panel_len(panel: *const CcmplusPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.inner.len())
}

/// Classic skill matrix; entry `(m, n)` is manifold `m` estimating service `n`.
///
/// # Safety
/// `panel` is a live handle; `out` holds `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_ccm_matrix(
    panel: *const CcmplusPanel,
    dim: usize,
    tau: usize,
    out: *mut f64,
    capacity: usize,
) -> CcmplusStatus {
    guard(|| {
        let panel = panel.as_ref().ok_or_else(|| null("panel"))?;
        let m = ccm_matrix(&panel.inner, dim, tau)?;
        copy_out(m.skills.data(), out, capacity)
    })
}

/// Loads a checkpoint written by `ccmplus train`.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_model_load(path: *const c_char, out: *mut *mut CcmplusModel) -> CcmplusStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CcmplusModel { inner: ck }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_model_free(model: *mut CcmplusModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of services the model was trained on, or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_model_services(model: *const CcmplusModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.service_ids.len())
}

/// Stored `N x N` causal matrix, row-major.
///
/// # Safety
/// `model` is a live handle; `out` holds `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_model_causal_matrix(
    model: *const CcmplusModel,
    out: *mut f64,
    capacity: usize,
) -> CcmplusStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let causal = model
            .inner
            .params
            .causal
            .as_ref()
            .ok_or_else(|| Failure::Status(CcmplusStatus::Config, "model holds no causal matrix".into()))?;
        copy_out(causal.raw.data(), out, capacity)
    })
}

/// Test-split MSE and MAE of `model` on `panel`, using the split ratios and
/// batch size stored with the model.
///
/// # Safety
/// Handles are live; outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn ccmplus_model_evaluate(
    model: *const CcmplusModel,
    panel: *const CcmplusPanel,
    out_mse: *mut f64,
    out_mae: *mut f64,
    out_samples: *mut usize,
) -> CcmplusStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let panel = panel.as_ref().ok_or_else(|| null("panel"))?;
        if out_mse.is_null() || out_mae.is_null() || out_samples.is_null() {
            return Err(null("output"));
        }
        let settings = RunConfig::from_echo(&model.inner.config_echo)?;
        let m = eval_checkpoint_on_panel(&model.inner, &panel.inner, settings.batch_size(), settings.split_ratios())?;
        *out_mse = m.mse;
        *out_mae = m.mae;
        *out_samples = m.n_samples;
        Ok(())
    })
}
