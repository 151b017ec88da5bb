//! C ABI over the gustpost library.
//!
//! Every function returns a `GpStatus`. Results come back through out
//! pointers. On failure the calling thread's last error message is set and can
//! be read with `gp_last_error`. Handles are opaque and must be released with
//! their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use gustpost::domain::{load_archive, ArchiveManifest, Dataset, ThresholdSet};
use gustpost::pipeline::{self, Method, MethodOptions, TrainedModel};
use gustpost::synthgen::{ARCHIVE_FILE, MANIFEST_FILE};
use gustpost::verification::brier_score;
use gustpost::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    InsufficientData = 5,
    MissingInput = 6,
    Model = 7,
    Numeric = 8,
    Panic = 9,
}

/// Mode bits for `gp_model_train`.
pub const GP_MODE_PERSISTENCE: u32 = 1;
pub const GP_MODE_ERA_FLAGS: u32 = 2;
pub const GP_MODE_JOINT: u32 = 4;
pub const GP_MODE_POST_CHANGE: u32 = 8;

/// Loaded forecast archive.
pub struct GpDataset {
    inner: Dataset,
    rejected: usize,
}

/// Trained postprocessing model.
pub struct GpModel {
    inner: TrainedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> GpStatus {
    match e {
        Error::Io { .. } => GpStatus::Io,
        Error::Csv(_)
        | Error::Json(_)
        | Error::Manifest(_)
        | Error::MissingColumn(_)
        | Error::UnitMismatch { .. }
        | Error::FormatVersion { .. } => GpStatus::Parse,
        Error::InsufficientData { .. } => GpStatus::InsufficientData,
        Error::MissingPersistence(_)
        | Error::MissingObservation(_)
        | Error::UnknownStation(_)
        | Error::FeatureLength { .. } => GpStatus::MissingInput,
        Error::NoModel(_) => GpStatus::Model,
        Error::NonFiniteLoss { .. } | Error::Undefined(_) => GpStatus::Numeric,
        _ => GpStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (GpStatus, String)>) -> GpStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GpStatus::Panic
        }
    }
}

fn lib<T>(r: gustpost::Result<T>) -> Result<T, (GpStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (GpStatus, String) {
    (GpStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (GpStatus, String) {
    (GpStatus::InvalidArgument, msg.into())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (GpStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (GpStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next gp_ call on the same thread.
#[no_mangle]
pub extern "C" fn gp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads an archive directory (archive.csv + manifest.toml) or an archive CSV
/// with manifest.toml beside it.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gp_dataset_load(path: *const c_char, out: *mut *mut GpDataset) -> GpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = Path::new(c_str(path, "path")?);
        let (csv, dir): (PathBuf, PathBuf) = if path.is_dir() {
            (path.join(ARCHIVE_FILE), path.to_path_buf())
        } else {
            (
                path.to_path_buf(),
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            )
        };
        let manifest = lib(ArchiveManifest::load(dir.join(MANIFEST_FILE)))?;
        let report = lib(load_archive(&csv, &manifest))?;
        *out = Box::into_raw(Box::new(GpDataset {
            inner: report.dataset,
            rejected: report.rejected.len(),
        }));
        Ok(())
    })
}

/// Number of accepted cases and rejected rows.
///
/// # Safety
/// `dataset` must come from `gp_dataset_load`; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn gp_dataset_size(
    dataset: *const GpDataset,
    cases: *mut usize,
    rejected: *mut usize,
) -> GpStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        if !cases.is_null() {
            *cases = d.inner.cases.len();
        }
        if !rejected.is_null() {
            *rejected = d.rejected;
        }
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from `gp_dataset_load` or be null.
#[no_mangle]
pub unsafe extern "C" fn gp_dataset_free(dataset: *mut GpDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains `method` ("mosref", "emos", "emos_gb", "drn", "bqn") on every case
/// of the dataset. `mode` is a combination of the GP_MODE_ bits.
///
/// # Safety
/// `dataset` must be a valid handle, `method` a NUL-terminated string and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gp_model_train(
    dataset: *const GpDataset,
    method: *const c_char,
    mode: u32,
    seed: u64,
    out: *mut *mut GpModel,
) -> GpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let method: Method = lib(c_str(method, "method")?.parse())?;
        if mode & !(GP_MODE_PERSISTENCE | GP_MODE_ERA_FLAGS | GP_MODE_JOINT | GP_MODE_POST_CHANGE) != 0 {
            return Err(invalid(format!("unknown mode bits {mode:#x}")));
        }
        let options = MethodOptions {
            persistence: mode & GP_MODE_PERSISTENCE != 0,
            era_flags: mode & GP_MODE_ERA_FLAGS != 0,
            joint: mode & GP_MODE_JOINT != 0,
            post_change_only: mode & GP_MODE_POST_CHANGE != 0,
            seed,
            thresholds: d.inner.manifest.thresholds.clone(),
            ..Default::default()
        };
        lib(options.validate(method))?;
        let model = lib(pipeline::train(method, &options, &d.inner.refs(), &d.inner.manifest))?;
        *out = Box::into_raw(Box::new(GpModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gp_model_load(path: *const c_char, out: *mut *mut GpModel) -> GpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = lib(TrainedModel::load(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(GpModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a valid handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gp_model_save(model: *const GpModel, path: *const c_char) -> GpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        lib(m.inner.save(c_str(path, "path")?))
    })
}

/// # Safety
/// `model` must come from `gp_model_train` or `gp_model_load`, or be null.
#[no_mangle]
pub unsafe extern "C" fn gp_model_free(model: *mut GpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Exceedance probabilities P(gust > t) of dataset case `case_index` for the
/// `n` increasing thresholds, written to `probs` (length `n`).
///
/// # Safety
/// Handles must be valid; `thresholds` and `probs` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn gp_model_predict(
    model: *const GpModel,
    dataset: *const GpDataset,
    case_index: usize,
    thresholds: *const f64,
    n: usize,
    probs: *mut f64,
) -> GpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let t = lib(ThresholdSet::new(slice(thresholds, n, "thresholds")?.to_vec()))?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let case = d.inner.cases.get(case_index).ok_or_else(|| {
            invalid(format!(
                "case index {case_index} out of range ({} cases)",
                d.inner.cases.len()
            ))
        })?;
        let f = lib(m.inner.predict(case, &t))?;
        std::slice::from_raw_parts_mut(probs, n).copy_from_slice(&f.probabilities);
        Ok(())
    })
}

/// Mean Brier score of `n` probability forecasts against 0/1 outcomes.
///
/// # Safety
/// `forecasts` and `outcomes` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gp_brier_score(
    forecasts: *const f64,
    outcomes: *const f64,
    n: usize,
    out: *mut f64,
) -> GpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let f = slice(forecasts, n, "forecasts")?;
        let o = slice(outcomes, n, "outcomes")?;
        *out = lib(brier_score(f, o))?;
        Ok(())
    })
}
