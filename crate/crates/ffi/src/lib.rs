//! C interface to mgnet3d.
//!
//! Models are opaque `MgnModel` handles. Every fallible call returns an
//! `MgnStatus`; on failure the message is available from `mgn_last_error`
//! on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use mgnet3d::engine::Tensor;
use mgnet3d::metrics::roc_auc;
use mgnet3d::model::{
    build, forward, load_checkpoint, param_count, save_checkpoint, MgNetConfig, MgNetParams,
};
use mgnet3d::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgnStatus {
    Ok = 0,
    NullPointer = 1,
    Argument = 2,
    Config = 3,
    State = 4,
    Shape = 5,
    Format = 6,
    Data = 7,
    Io = 8,
    Divergence = 9,
    Panic = 10,
}

/// Opaque model handle.
pub struct MgnModel {
    params: MgNetParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> MgnStatus {
    match err {
        Error::Shape(_) => MgnStatus::Shape,
        Error::Argument(_) => MgnStatus::Argument,
        Error::Config(_) => MgnStatus::Config,
        Error::State(_) => MgnStatus::State,
        Error::Format(_) => MgnStatus::Format,
        Error::Data(_) => MgnStatus::Data,
        Error::Divergence { .. } => MgnStatus::Divergence,
        Error::Io(_) => MgnStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> MgnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MgnStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            MgnStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            MgnStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, Failure> {
    let p = non_null(path, "path")?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::Argument("path is not valid UTF-8".into())))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mgn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a freshly initialised model with `num_grids` levels, `smoothing`
/// iterations per level and `channels` feature channels, for single-channel
/// input and two classes.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mgn_model_new(
    num_grids: u32,
    smoothing: u32,
    channels: u32,
    use_avg_pool: bool,
    seed: u64,
    out: *mut *mut MgnModel,
) -> MgnStatus {
    guard(|| {
        non_null(out, "out")?;
        let mut config =
            MgNetConfig::uniform(num_grids as usize, smoothing as usize, channels as usize);
        config.use_avg_pool = use_avg_pool;
        config.seed = seed;
        let params = build(&config)?;
        *out = Box::into_raw(Box::new(MgnModel { params }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer to
/// writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mgn_model_load(path: *const c_char, out: *mut *mut MgnModel) -> MgnStatus {
    guard(|| {
        non_null(out, "out")?;
        let params = load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MgnModel { params }));
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mgn_model_save(model: *const MgnModel, path: *const c_char) -> MgnStatus {
    guard(|| {
        let model = &*non_null(model, "model")?;
        save_checkpoint(&model.params, path_arg(path)?)?;
        Ok(())
    })
}

/// Number of learnable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mgn_model_param_count(model: *const MgnModel) -> usize {
    model.as_ref().map_or(0, |m| param_count(&m.params))
}

/// Number of logits produced by `mgn_model_forward`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mgn_model_num_classes(model: *const MgnModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.num_classes)
}

/// Runs the network on one `[channels, depth, height, width]` volume of
/// row-major floats and writes the class logits.
///
/// # Safety
/// `volume` must hold `channels * depth * height * width` floats and
/// `logits` must have room for `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mgn_model_forward(
    model: *const MgnModel,
    volume: *const f32,
    channels: usize,
    depth: usize,
    height: usize,
    width: usize,
    logits: *mut f32,
    logits_len: usize,
) -> MgnStatus {
    guard(|| {
        let model = &*non_null(model, "model")?;
        let volume = non_null(volume, "volume")?;
        non_null(logits, "logits")?;
        let shape = [channels, depth, height, width];
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| Error::Shape("volume size overflows".into()))?;
        let input = Tensor::new(&shape, slice::from_raw_parts(volume, numel).to_vec())?;
        let z = forward(&model.params, &input)?;
        if logits_len < z.numel() {
            return Err(Error::Argument(format!(
                "logits buffer holds {logits_len}, need {}",
                z.numel()
            ))
            .into());
        }
        slice::from_raw_parts_mut(logits, z.numel()).copy_from_slice(z.data());
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mgn_model_free(model: *mut MgnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Area under the ROC curve of `n` scores with 0/1 labels.
///
/// # Safety
/// `labels` and `scores` must each hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mgn_roc_auc(
    labels: *const u8,
    scores: *const f64,
    n: usize,
    out: *mut f64,
) -> MgnStatus {
    guard(|| {
        let labels = non_null(labels, "labels")?;
        let scores = non_null(scores, "scores")?;
        non_null(out, "out")?;
        *out = roc_auc(
            slice::from_raw_parts(labels, n),
            slice::from_raw_parts(scores, n),
        )?;
        Ok(())
    })
}
