//! C ABI over `vnt-core`.
//!
//! Models are opaque `VntModel` handles. Every fallible call returns a
//! [`VntStatus`]; on failure `vnt_last_error_message` describes the error for
//! the calling thread. Point buffers are row-major `n × 3` doubles of a raw
//! cloud, which is centered and scaled to the unit ball before use.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vnt_core::checkpoint;
use vnt_core::data::normalize;
use vnt_core::model::{count_params, init_model, one_hot, ModelConfig, Task, VntModel as Model};
use vnt_core::rng::seeded;
use vnt_core::{Error, Tensor};

/// Opaque model handle.
pub struct VntModel {
    inner: Model,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VntStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Checkpoint = 5,
    Numeric = 6,
    BufferSize = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(VntStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::Json(_) => VntStatus::Config,
            Error::Data { .. } | Error::Parse { .. } | Error::Degenerate(_) | Error::Io(_) => VntStatus::Data,
            Error::Checkpoint { .. } => VntStatus::Checkpoint,
            Error::NonFinite(_) => VntStatus::Numeric,
            Error::Shape { .. } | Error::Contract(_) => VntStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn fail<T>(status: VntStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VntStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            VntStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            VntStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return fail(VntStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(VntStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(m: *const VntModel) -> Result<&'a Model, Fail> {
    match m.as_ref() {
        Some(m) => Ok(&m.inner),
        None => fail(VntStatus::NullPointer, "model handle is null"),
    }
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    match p.as_mut() {
        Some(p) => Ok(p),
        None => fail(VntStatus::NullPointer, format!("{what} is null")),
    }
}

unsafe fn points_arg(points: *const f64, n: usize) -> Result<Tensor, Fail> {
    if points.is_null() {
        return fail(VntStatus::NullPointer, "points is null");
    }
    if n == 0 {
        return fail(VntStatus::InvalidArgument, "cloud has no points");
    }
    let Some(len) = n.checked_mul(3) else {
        return fail(VntStatus::InvalidArgument, "point count overflows");
    };
    let data = std::slice::from_raw_parts(points, len).to_vec();
    Ok(normalize(&Tensor::new(vec![n, 3], data)?)?)
}

unsafe fn write_out(t: &Tensor, out: *mut f64, len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return fail(VntStatus::NullPointer, "output buffer is null");
    }
    if len != t.numel() {
        return fail(
            VntStatus::BufferSize,
            format!("output buffer holds {len} values, {} required", t.numel()),
        );
    }
    std::slice::from_raw_parts_mut(out, len).copy_from_slice(t.data());
    Ok(())
}

fn parse_config(json: &str) -> Result<ModelConfig, Fail> {
    let cfg: ModelConfig = serde_json::from_str(json).map_err(|e| Fail(VntStatus::Config, e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn category_arg(model: &Model, category: usize) -> Result<Tensor, Fail> {
    if model.config.task != Task::Segmentation {
        return fail(VntStatus::InvalidArgument, "model is not a segmentation model");
    }
    if category >= model.config.num_categories {
        return fail(
            VntStatus::InvalidArgument,
            format!("category {category} out of range ({})", model.config.num_categories),
        );
    }
    Ok(one_hot(category, model.config.num_categories)?)
}

/// Builds a freshly initialized model from a JSON model configuration.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vnt_model_new(config_json: *const c_char, seed: u64, out: *mut *mut VntModel) -> VntStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = parse_config(str_arg(config_json, "config_json")?)?;
        let inner = init_model(&cfg, &mut seeded(seed))?;
        *out = Box::into_raw(Box::new(VntModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vnt_model_load(dir: *const c_char, out: *mut *mut VntModel) -> VntStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let inner = checkpoint::load(&dir)?.model;
        *out = Box::into_raw(Box::new(VntModel { inner }));
        Ok(())
    })
}

/// Writes the model (without optimizer state) to a checkpoint directory.
///
/// # Safety
/// `model` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vnt_model_save(model: *const VntModel, dir: *const c_char) -> VntStatus {
    guard(|| {
        let model = model_arg(model)?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        checkpoint::save(&dir, model, None, None)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vnt_model_free(model: *mut VntModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vnt_model_num_params(model: *const VntModel, out: *mut usize) -> VntStatus {
    guard(|| {
        *out_arg(out, "out")? = model_arg(model)?.num_params();
        Ok(())
    })
}

/// Number of logits per cloud (classification) or per point (segmentation).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vnt_model_num_outputs(model: *const VntModel, out: *mut usize) -> VntStatus {
    guard(|| {
        *out_arg(out, "out")? = model_arg(model)?.config.num_classes;
        Ok(())
    })
}

/// Class logits for one cloud; `logits_len` must equal the output count.
///
/// # Safety
/// `points` must hold `n * 3` doubles and `logits` `logits_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vnt_classify(
    model: *const VntModel,
    points: *const f64,
    n: usize,
    logits: *mut f64,
    logits_len: usize,
) -> VntStatus {
    guard(|| {
        let model = model_arg(model)?;
        if model.config.task != Task::Classification {
            return fail(VntStatus::InvalidArgument, "model is not a classification model");
        }
        let x = points_arg(points, n)?;
        write_out(&model.predict(&x, None)?, logits, logits_len)
    })
}

/// Per-point part logits, row-major `n × outputs`.
///
/// # Safety
/// `points` must hold `n * 3` doubles and `logits` `logits_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vnt_segment(
    model: *const VntModel,
    points: *const f64,
    n: usize,
    category: usize,
    logits: *mut f64,
    logits_len: usize,
) -> VntStatus {
    guard(|| {
        let model = model_arg(model)?;
        let cat = category_arg(model, category)?;
        let x = points_arg(points, n)?;
        write_out(&model.predict(&x, Some(&cat))?, logits, logits_len)
    })
}

/// Row-stochastic `n × n` attention matrix of one block and head.
/// `category` is ignored for classification models.
///
/// # Safety
/// `points` must hold `n * 3` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vnt_attention(
    model: *const VntModel,
    points: *const f64,
    n: usize,
    category: usize,
    block: usize,
    head: usize,
    out: *mut f64,
    out_len: usize,
) -> VntStatus {
    guard(|| {
        let model = model_arg(model)?;
        if block >= model.config.blocks || head >= model.config.heads {
            return fail(
                VntStatus::InvalidArgument,
                format!("block {block}/head {head} out of range"),
            );
        }
        let cat = match model.config.task {
            Task::Segmentation => Some(category_arg(model, category)?),
            Task::Classification => None,
        };
        let x = points_arg(points, n)?;
        write_out(&model.attention_weights(&x, cat.as_ref(), block, head)?, out, out_len)
    })
}

/// Parameter total implied by a JSON model configuration.
///
/// # Safety
/// `config_json` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vnt_count_params(config_json: *const c_char, out: *mut usize) -> VntStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = count_params(&parse_config(str_arg(config_json, "config_json")?)?)?.total;
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn vnt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}
