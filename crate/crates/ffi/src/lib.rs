//! C interface to mmcot.
//!
//! Every function returns an [`MmcotStatus`]. On failure a message is kept
//! per thread and can be read with [`mmcot_last_error`]. Strings handed out
//! by the library must be released with [`mmcot_string_free`], models with
//! [`mmcot_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mmcot::data::{tokenize, split_tokens, VisionFeatures};
use mmcot::eval::rouge_l;
use mmcot::model::load_checkpoint;
use mmcot::pipeline::{extract_answer, StageModel};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmcotStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Format = 5,
    Model = 6,
    Panic = 7,
}

/// A loaded checkpoint. Opaque to C.
pub struct MmcotModel {
    inner: StageModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: MmcotStatus, message: impl Into<String>) -> MmcotStatus {
    set_error(message);
    status
}

fn guard(f: impl FnOnce() -> MmcotStatus) -> MmcotStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == MmcotStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            status
        }
        Err(_) => fail(MmcotStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, MmcotStatus> {
    if p.is_null() {
        return Err(fail(MmcotStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MmcotStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn to_c_string(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn mmcot_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mmcot_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an MMCK checkpoint written by `mmcot train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mmcot_model_load(path: *const c_char, out: *mut *mut MmcotModel) -> MmcotStatus {
    guard(|| {
        if out.is_null() {
            return fail(MmcotStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match read_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ckpt = match load_checkpoint(path) {
            Ok(c) => c,
            Err(mmcot::model::ModelError::Io { source, .. }) => {
                return fail(MmcotStatus::Io, format!("{path}: {source}"))
            }
            Err(e) => return fail(MmcotStatus::Format, e.to_string()),
        };
        match StageModel::from_checkpoint(ckpt) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(MmcotModel { inner }));
                MmcotStatus::Ok
            }
            Err(e) => fail(MmcotStatus::Format, e.to_string()),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`mmcot_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mmcot_model_free(model: *mut MmcotModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the feature shape the model expects (patches, feature width) and
/// its vocabulary size.
///
/// # Safety
/// `model` must be a live model; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmcot_model_shape(
    model: *const MmcotModel,
    patches: *mut usize,
    vision_dim: *mut usize,
    vocab_size: *mut usize,
) -> MmcotStatus {
    guard(|| {
        if model.is_null() || patches.is_null() || vision_dim.is_null() || vocab_size.is_null() {
            return fail(MmcotStatus::NullPointer, "null argument");
        }
        let c = &(*model).inner.model.config;
        *patches = c.patches;
        *vision_dim = c.vision_dim;
        *vocab_size = c.vocab_size;
        MmcotStatus::Ok
    })
}

/// Greedy generation from `input` with a row-major `patches x vision_dim`
/// feature matrix. A null `features` means all zeros. The generated text is
/// written to `*out` and must be freed with [`mmcot_string_free`].
///
/// # Safety
/// `input` must be NUL-terminated; `features`, when non-null, must point to
/// `n_features` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmcot_model_generate(
    model: *const MmcotModel,
    input: *const c_char,
    features: *const f32,
    n_features: usize,
    max_new_tokens: usize,
    out: *mut *mut c_char,
) -> MmcotStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(MmcotStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let input = match read_str(input, "input") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let m = &(*model).inner.model;
        let (p, d) = (m.config.patches, m.config.vision_dim);
        let feats = if features.is_null() {
            VisionFeatures::zeros(p, d)
        } else {
            if n_features != p * d {
                return fail(
                    MmcotStatus::InvalidArgument,
                    format!("expected {} feature values ({p}x{d}), got {n_features}", p * d),
                );
            }
            let values = std::slice::from_raw_parts(features, n_features).to_vec();
            match VisionFeatures::new(p, d, values) {
                Ok(f) => f,
                Err(e) => return fail(MmcotStatus::InvalidArgument, e.to_string()),
            }
        };
        let ids = tokenize(input, &m.vocab);
        match m.generate_greedy(&ids, &feats, max_new_tokens) {
            Ok(g) => {
                *out = to_c_string(&g.text);
                MmcotStatus::Ok
            }
            Err(e) => fail(MmcotStatus::Model, e.to_string()),
        }
    })
}

/// RougeL F-measure between two texts.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmcot_rouge_l(candidate: *const c_char, reference: *const c_char, out: *mut f64) -> MmcotStatus {
    guard(|| {
        if out.is_null() {
            return fail(MmcotStatus::NullPointer, "out is null");
        }
        let (c, r) = match (read_str(candidate, "candidate"), read_str(reference, "reference")) {
            (Ok(c), Ok(r)) => (c, r),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        *out = rouge_l(c, r);
        MmcotStatus::Ok
    })
}

/// Token count of `text` under the library's tokenizer.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmcot_count_tokens(text: *const c_char, out: *mut usize) -> MmcotStatus {
    guard(|| {
        if out.is_null() {
            return fail(MmcotStatus::NullPointer, "out is null");
        }
        match read_str(text, "text") {
            Ok(t) => {
                *out = split_tokens(t).len();
                MmcotStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Extracts the answer index from generated text; `*out` is -1 when no
/// answer among the first `n_options` letters is found.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmcot_extract_answer(text: *const c_char, n_options: usize, out: *mut i32) -> MmcotStatus {
    guard(|| {
        if out.is_null() {
            return fail(MmcotStatus::NullPointer, "out is null");
        }
        if !(2..=5).contains(&n_options) {
            return fail(MmcotStatus::InvalidArgument, format!("n_options = {n_options} outside 2..=5"));
        }
        match read_str(text, "text") {
            Ok(t) => {
                *out = extract_answer(t, n_options).map_or(-1, |i| i as i32);
                MmcotStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mmcot_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
