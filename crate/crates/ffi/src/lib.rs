//! C ABI over the syllabification core: load a checkpoint into an opaque
//! handle, syllabify NUL-terminated phone strings, and free what you got.
//! Every function is thread-safe over distinct handles; a loaded model is
//! immutable and may be shared across threads.
//!
//! The generated header lives at `include/syllabel.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use syllabel_core::checkpoint::{load_checkpoint, Checkpoint};

/// Opaque handle to a loaded model.
pub struct SyllabelModel {
    checkpoint: Checkpoint,
}

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyllabelStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// An input string was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The checkpoint could not be read; see `syllabel_last_error_message`.
    LoadFailed = 3,
    /// The input line contained no phones.
    EmptyInput = 4,
    /// Inference failed; see `syllabel_last_error_message`.
    SyllabifyFailed = 5,
    /// A panic was caught at the FFI boundary.
    InternalError = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Message describing the most recent failure on this thread, or NULL when
/// the last call succeeded. The pointer is valid until the next call into
/// this library from the same thread; do not free it.
#[no_mangle]
pub extern "C" fn syllabel_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Library version as a static NUL-terminated string; do not free it.
#[no_mangle]
pub extern "C" fn syllabel_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Loads a checkpoint from `path` into a newly allocated model handle.
///
/// On success writes the handle to `out_model` and returns `Ok`; the
/// caller must release it with `syllabel_model_free`.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out_model` to a valid
/// pointer slot.
#[no_mangle]
pub unsafe extern "C" fn syllabel_model_load(
    path: *const c_char,
    out_model: *mut *mut SyllabelModel,
) -> SyllabelStatus {
    clear_last_error();
    if path.is_null() || out_model.is_null() {
        return SyllabelStatus::NullArgument;
    }
    let result = catch_unwind(AssertUnwindSafe(|| {
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return SyllabelStatus::InvalidUtf8;
        };
        match load_checkpoint(Path::new(path)) {
            Ok(checkpoint) => {
                let model = Box::new(SyllabelModel { checkpoint });
                *out_model = Box::into_raw(model);
                SyllabelStatus::Ok
            }
            Err(err) => {
                set_last_error(err.to_string());
                SyllabelStatus::LoadFailed
            }
        }
    }));
    result.unwrap_or(SyllabelStatus::InternalError)
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `model` must be a handle returned by `syllabel_model_load` that has not
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn syllabel_model_free(model: *mut SyllabelModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of the loaded model, reserved tokens included.
/// Returns 0 when `model` is NULL.
///
/// # Safety
/// `model` must be NULL or a live handle from `syllabel_model_load`.
#[no_mangle]
pub unsafe extern "C" fn syllabel_model_vocab_size(model: *const SyllabelModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).checkpoint.vocabulary.size()
}

/// Syllabifies one line of phones (tokenized per the model's lexicon
/// format; phones unseen in training are fed to the network as UNK).
///
/// On success writes a newly allocated NUL-terminated string to `out_text`;
/// release it with `syllabel_string_free`.
///
/// # Safety
/// `model` must be a live handle, `phones` a NUL-terminated string, and
/// `out_text` a valid pointer slot.
#[no_mangle]
pub unsafe extern "C" fn syllabel_syllabify(
    model: *const SyllabelModel,
    phones: *const c_char,
    out_text: *mut *mut c_char,
) -> SyllabelStatus {
    clear_last_error();
    if model.is_null() || phones.is_null() || out_text.is_null() {
        return SyllabelStatus::NullArgument;
    }
    let result = catch_unwind(AssertUnwindSafe(|| {
        let Ok(line) = CStr::from_ptr(phones).to_str() else {
            return SyllabelStatus::InvalidUtf8;
        };
        match (*model).checkpoint.syllabify_line(line) {
            Ok(Some(result)) => match CString::new(result.text) {
                Ok(text) => {
                    *out_text = text.into_raw();
                    SyllabelStatus::Ok
                }
                Err(_) => SyllabelStatus::InternalError,
            },
            Ok(None) => SyllabelStatus::EmptyInput,
            Err(err) => {
                set_last_error(err.to_string());
                SyllabelStatus::SyllabifyFailed
            }
        }
    }));
    result.unwrap_or(SyllabelStatus::InternalError)
}

/// Frees a string returned by `syllabel_syllabify`. NULL is ignored.
///
/// # Safety
/// `s` must be a pointer returned by this library that has not been freed
/// already.
#[no_mangle]
pub unsafe extern "C" fn syllabel_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
