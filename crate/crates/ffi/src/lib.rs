//! C ABI over `cdrisk`: load a codebook and per-disease checkpoints, score raw
//! or cleaned answer vectors, and attribute a risk to features.
//!
//! Every fallible function returns a [`CdrStatus`]; on failure the message is
//! available from [`cdr_last_error_message`] on the same thread. Handles are
//! opaque and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cdrisk::checkpoint::{load_checkpoint, load_checkpoint_for};
use cdrisk::error::Error;
use cdrisk::explain::{kernel_shap, Background, KernelShapOptions, ShapMode};
use cdrisk::ingest::{validate_features, RawRecord};
use cdrisk::model::RiskModel;
use cdrisk::schema::{load_codebook, FeatureSchema};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    MalformedCodebook = 4,
    BadMagic = 5,
    VersionMismatch = 6,
    SchemaHashMismatch = 7,
    /// The answers failed cleaning; the message lists each field and reason.
    Rejected = 8,
    Internal = 9,
}

/// A validated codebook.
pub struct CdrSchema {
    schema: FeatureSchema,
    ids: Vec<CString>,
}

/// One disease model.
pub struct CdrModel {
    model: RiskModel,
    disease: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CdrStatus {
    match e {
        Error::Io(_) | Error::Csv(_) => CdrStatus::Io,
        Error::MalformedCodebook(_) | Error::SchemaArity { .. } | Error::DuplicateId(_) | Error::Json(_) => {
            CdrStatus::MalformedCodebook
        }
        Error::BadMagic => CdrStatus::BadMagic,
        Error::VersionMismatch { .. } => CdrStatus::VersionMismatch,
        Error::SchemaHashMismatch { .. } => CdrStatus::SchemaHashMismatch,
        Error::DimensionMismatch { .. } | Error::InvalidConfig(_) | Error::UnknownFeature(_) | Error::UnknownLabel(_) => {
            CdrStatus::InvalidArgument
        }
        _ => CdrStatus::Internal,
    }
}

fn fail(status: CdrStatus, msg: &str) -> CdrStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> CdrStatus {
    fail(status_of(&e), &e.to_string())
}

/// Run `f`, turning a panic into `Internal`.
fn guard(f: impl FnOnce() -> CdrStatus) -> CdrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(CdrStatus::Internal, "internal panic"),
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, CdrStatus> {
    if path.is_null() {
        return Err(fail(CdrStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(CdrStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize, expected: usize) -> Result<&'a [f64], CdrStatus> {
    if ptr.is_null() {
        return Err(fail(CdrStatus::NullPointer, "input vector is null"));
    }
    if len != expected {
        return Err(fail(CdrStatus::InvalidArgument, &format!("expected {expected} values, got {len}")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

fn wrap_schema(schema: FeatureSchema) -> *mut CdrSchema {
    let ids = schema.feature_ids().into_iter().map(|id| CString::new(id).unwrap_or_default()).collect();
    Box::into_raw(Box::new(CdrSchema { schema, ids }))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cdr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failure on this thread; empty if none. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cdr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// The built-in codebook.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn cdr_schema_builtin(out: *mut *mut CdrSchema) -> CdrStatus {
    guard(|| {
        if out.is_null() {
            return fail(CdrStatus::NullPointer, "out is null");
        }
        *out = wrap_schema(FeatureSchema::builtin());
        CdrStatus::Ok
    })
}

/// Load and validate a codebook JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_schema_load(path: *const c_char, out: *mut *mut CdrSchema) -> CdrStatus {
    guard(|| {
        if out.is_null() {
            return fail(CdrStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_codebook(path) {
            Ok(schema) => {
                *out = wrap_schema(schema);
                CdrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `schema` must come from `cdr_schema_*` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cdr_schema_free(schema: *mut CdrSchema) {
    if !schema.is_null() {
        drop(Box::from_raw(schema));
    }
}

/// Number of input features; 0 for a null handle.
///
/// # Safety
/// `schema` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cdr_schema_feature_count(schema: *const CdrSchema) -> usize {
    schema.as_ref().map_or(0, |s| s.ids.len())
}

/// Feature id at `index` (declaration order), owned by the schema; null if out of range.
///
/// # Safety
/// `schema` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cdr_schema_feature_id(schema: *const CdrSchema, index: usize) -> *const c_char {
    match schema.as_ref().and_then(|s| s.ids.get(index)) {
        Some(id) => id.as_ptr(),
        None => ptr::null(),
    }
}

/// Load a checkpoint. When `schema` is non-null the checkpoint must have been
/// trained against it.
///
/// # Safety
/// `path` must be a NUL-terminated string, `schema` null or live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_model_load(path: *const c_char, schema: *const CdrSchema, out: *mut *mut CdrModel) -> CdrStatus {
    guard(|| {
        if out.is_null() {
            return fail(CdrStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let loaded = match schema.as_ref() {
            Some(s) => load_checkpoint_for(path, &s.schema),
            None => load_checkpoint(path),
        };
        match loaded {
            Ok(model) => {
                let disease = CString::new(model.disease.clone()).unwrap_or_default();
                *out = Box::into_raw(Box::new(CdrModel { model, disease }));
                CdrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `model` must come from `cdr_model_load` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cdr_model_free(model: *mut CdrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width of the model; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cdr_model_input_dim(model: *const CdrModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.input_dim())
}

/// Disease id the model predicts, owned by the model; null for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cdr_model_disease(model: *const CdrModel) -> *const c_char {
    model.as_ref().map_or(ptr::null(), |m| m.disease.as_ptr())
}

/// Clean raw answers (schema order, NaN = empty answer) and score them.
///
/// # Safety
/// Handles must be live; `values` must point to `len` doubles; `risk` writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_model_risk_raw(
    model: *const CdrModel,
    schema: *const CdrSchema,
    values: *const f64,
    len: usize,
    risk: *mut f64,
) -> CdrStatus {
    guard(|| {
        let (Some(m), Some(s)) = (model.as_ref(), schema.as_ref()) else {
            return fail(CdrStatus::NullPointer, "model or schema is null");
        };
        if risk.is_null() {
            return fail(CdrStatus::NullPointer, "risk is null");
        }
        let values = match slice_arg(values, len, s.ids.len()) {
            Ok(v) => v,
            Err(st) => return st,
        };
        let raw: RawRecord = s
            .schema
            .feature_ids()
            .into_iter()
            .zip(values)
            .map(|(id, &v)| (id.to_string(), (!v.is_nan()).then_some(v)))
            .collect();
        let x = match validate_features(&raw, &s.schema) {
            Ok(x) => x,
            Err(rej) => {
                let fields: Vec<String> = rej.iter().map(|r| format!("{}: {}", r.feature_id, r.reason)).collect();
                return fail(CdrStatus::Rejected, &fields.join("; "));
            }
        };
        match m.model.predict_clean(&x) {
            Ok(p) => {
                *risk = p.risk();
                CdrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Score already-cleaned values (schema order, clean units).
///
/// # Safety
/// `model` must be live; `values` must point to `len` doubles; `risk` writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_model_risk_clean(model: *const CdrModel, values: *const f64, len: usize, risk: *mut f64) -> CdrStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(CdrStatus::NullPointer, "model is null");
        };
        if risk.is_null() {
            return fail(CdrStatus::NullPointer, "risk is null");
        }
        let x = match slice_arg(values, len, m.model.input_dim()) {
            Ok(v) => v,
            Err(st) => return st,
        };
        match m.model.predict_clean(x) {
            Ok(p) => {
                *risk = p.risk();
                CdrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Kernel SHAP attribution of cleaned values against the training mean.
/// Writes `len` values to `phi` plus the baseline and the risk at `values`.
///
/// # Safety
/// `model` must be live; `values` and `phi` must each hold `len` doubles;
/// `base` and `fx` writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_model_explain(
    model: *const CdrModel,
    values: *const f64,
    len: usize,
    budget: usize,
    seed: u64,
    phi: *mut f64,
    base: *mut f64,
    fx: *mut f64,
) -> CdrStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(CdrStatus::NullPointer, "model is null");
        };
        if phi.is_null() || base.is_null() || fx.is_null() {
            return fail(CdrStatus::NullPointer, "output pointer is null");
        }
        let x = match slice_arg(values, len, m.model.input_dim()) {
            Ok(v) => v,
            Err(st) => return st,
        };
        let z = m.model.norm.apply(x);
        let bg = Background::single(&vec![0.0; len]);
        let opts = KernelShapOptions { budget, seed, mode: ShapMode::Auto };
        match kernel_shap(&m.model, &z, &bg, &opts) {
            Ok(at) => {
                std::slice::from_raw_parts_mut(phi, len).copy_from_slice(&at.phi);
                *base = at.base;
                *fx = at.fx;
                CdrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
