//! C ABI over the `diae` library.
//!
//! Every fallible call returns a [`DiaeStatus`]; on failure the message is
//! kept per thread and read back with [`diae_last_error`]. Sample matrices
//! cross the boundary samples-major: sample `j`, feature `i` lives at
//! `data[j * dim + i]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use diae::classify::{knn_predict, LabeledFeatures};
use diae::data::one_hot;
use diae::layer::{Activation, ActivationKind, BregmanRule, TrainConfig};
use diae::stack::{encode_stack, load_model, save_model, train_stack, StackModel};
use diae::{Error, Matrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Format = 5,
    Io = 6,
    Panic = 7,
}

/// Opaque handle to a trained stack.
pub struct DiaeModel {
    inner: StackModel,
}

/// Per-layer training settings. `bregman_rule`: 0 paper, 1 standard.
/// `activation`: 0 identity, 1 tanh.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DiaeTrainConfig {
    pub lambda: f64,
    pub mu: f64,
    pub max_iter: u32,
    pub tol: f64,
    pub damping: f64,
    pub seed: u64,
    pub bregman_rule: u8,
    pub activation: u8,
    pub tanh_clamp: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> DiaeStatus {
    match err {
        Error::DimensionMismatch { .. } => DiaeStatus::DimensionMismatch,
        Error::Singular { .. } | Error::NotConverged { .. } | Error::Degenerate { .. } | Error::NonFinite { .. } => {
            DiaeStatus::Numerical
        }
        Error::InvalidArgument(_) | Error::Config(_) => DiaeStatus::InvalidArgument,
        Error::Format { .. } => DiaeStatus::Format,
        Error::Io { .. } => DiaeStatus::Io,
        Error::Layer { source, .. } => status_of(source),
    }
}

struct Fail(DiaeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DiaeStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DiaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DiaeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DiaeStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Fail> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(DiaeStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn checked_len(a: usize, b: usize) -> Result<usize, Fail> {
    a.checked_mul(b)
        .ok_or_else(|| Fail(DiaeStatus::InvalidArgument, format!("{a} x {b} overflows")))
}

/// Samples-major buffer → feature-major matrix.
fn from_samples(data: &[f64], n: usize, dim: usize) -> Result<Matrix, Fail> {
    let m = Matrix::from_vec(n, dim, data.to_vec())?;
    Ok(m.transpose())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn diae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn diae_train_config_default() -> DiaeTrainConfig {
    let d = TrainConfig::default();
    DiaeTrainConfig {
        lambda: d.lambda,
        mu: d.mu,
        max_iter: d.max_iter as u32,
        tol: d.tol,
        damping: d.damping,
        seed: d.seed,
        bregman_rule: 0,
        activation: 0,
        tanh_clamp: d.activation.tanh_clamp(),
    }
}

fn to_config(c: &DiaeTrainConfig) -> Result<TrainConfig, Fail> {
    let bad = |m: String| Fail(DiaeStatus::InvalidArgument, m);
    let bregman_rule = match c.bregman_rule {
        0 => BregmanRule::Paper,
        1 => BregmanRule::Standard,
        r => return Err(bad(format!("unknown Bregman rule {r}"))),
    };
    let kind = ActivationKind::from_tag(c.activation).ok_or_else(|| bad(format!("unknown activation {}", c.activation)))?;
    Ok(TrainConfig {
        lambda: c.lambda,
        mu: c.mu,
        max_iter: c.max_iter as usize,
        tol: c.tol,
        damping: c.damping,
        seed: c.seed,
        bregman_rule,
        activation: Activation::new(kind, c.tanh_clamp)?,
        ..TrainConfig::default()
    })
}

/// Loads a model file into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn diae_model_load(path: *const c_char, out: *mut *mut DiaeModel) -> DiaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_model(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DiaeModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn diae_model_save(model: *const DiaeModel, path: *const c_char) -> DiaeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        save_model(&m.inner, path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn diae_model_free(model: *mut DiaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn diae_model_num_layers(model: *const DiaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.layers.len())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn diae_model_input_dim(model: *const DiaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn diae_model_output_dim(model: *const DiaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.output_dim())
}

/// Encodes `n_samples` inputs of width `input_dim` into `out`, which must
/// hold `n_samples * output_dim` values, samples-major.
///
/// # Safety
/// `x` must hold `n_samples * input_dim` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn diae_model_encode(
    model: *const DiaeModel,
    x: *const f64,
    n_samples: usize,
    input_dim: usize,
    out: *mut f64,
    out_len: usize,
) -> DiaeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let h = m.inner.output_dim();
        let need = checked_len(n_samples, h)?;
        if out_len != need {
            return Err(Fail(
                DiaeStatus::DimensionMismatch,
                format!("output buffer holds {out_len} values, {need} needed"),
            ));
        }
        let data = slice(x, checked_len(n_samples, input_dim)?, "x")?;
        let enc = encode_stack(&m.inner, &from_samples(data, n_samples, input_dim)?)?;
        if need > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            let dst = std::slice::from_raw_parts_mut(out, need);
            dst.copy_from_slice(enc.transpose().as_slice());
        }
        Ok(())
    })
}

/// Trains a greedy stack. `cfg` holds one config shared by all layers, or
/// `n_layers` configs when `n_cfg == n_layers`.
///
/// # Safety
/// `x` must hold `n_samples * dim` values, `labels` `n_samples` values,
/// `widths` `n_layers` values and `cfg` `n_cfg` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn diae_train_stack(
    x: *const f64,
    n_samples: usize,
    dim: usize,
    labels: *const u32,
    classes: usize,
    widths: *const usize,
    n_layers: usize,
    cfg: *const DiaeTrainConfig,
    n_cfg: usize,
    out: *mut *mut DiaeModel,
) -> DiaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = slice(x, checked_len(n_samples, dim)?, "x")?;
        let labels: Vec<usize> = slice(labels, n_samples, "labels")?.iter().map(|&l| l as usize).collect();
        let widths = slice(widths, n_layers, "widths")?;
        let cfgs = slice(cfg, n_cfg, "cfg")?
            .iter()
            .map(to_config)
            .collect::<Result<Vec<_>, _>>()?;
        let l = one_hot(&labels, classes)?;
        let run = train_stack(&from_samples(data, n_samples, dim)?, l.as_matrix(), widths, &cfgs)?;
        *out = Box::into_raw(Box::new(DiaeModel { inner: run.model }));
        Ok(())
    })
}

/// k-nearest-neighbour labels for `n_query` queries written to `out`.
///
/// # Safety
/// Buffers must hold `n_train * dim`, `n_train`, `n_query * dim` and
/// `n_query` values respectively.
#[no_mangle]
pub unsafe extern "C" fn diae_knn_predict(
    train: *const f64,
    train_labels: *const u32,
    n_train: usize,
    dim: usize,
    query: *const f64,
    n_query: usize,
    k: usize,
    out: *mut u32,
) -> DiaeStatus {
    guard(|| {
        let t = from_samples(slice(train, checked_len(n_train, dim)?, "train")?, n_train, dim)?;
        let labels: Vec<usize> = slice(train_labels, n_train, "train_labels")?
            .iter()
            .map(|&l| l as usize)
            .collect();
        let q = from_samples(slice(query, checked_len(n_query, dim)?, "query")?, n_query, dim)?;
        let pred = knn_predict(&LabeledFeatures::new(t, labels)?, &q, k)?;
        if n_query > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            let dst = std::slice::from_raw_parts_mut(out, n_query);
            for (d, p) in dst.iter_mut().zip(pred) {
                *d = p as u32;
            }
        }
        Ok(())
    })
}
