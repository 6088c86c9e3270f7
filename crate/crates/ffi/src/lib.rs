//! C interface to the activation quantizer and the memory accountant.
//!
//! Every fallible call returns an [`S2aStatus`]. On failure a message is
//! kept per thread and can be read with [`s2a_last_error_message`].
//! Handles returned through out-pointers are owned by the caller and must
//! be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use s2a_core::memory::{build_model_spec, default_quantize, estimate, AccountingScope};
use s2a_core::petl::{Method, ViTConfig};
use s2a_core::quant::{dequantize, quantize, QuantBlob};
use s2a_core::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum S2aStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numeric = 4,
    Parse = 5,
    Config = 6,
    BufferTooSmall = 7,
    Internal = 8,
    Panic = 9,
}

/// Dense `f32` tensor.
pub struct S2aTensor(Tensor);

/// Packed low-bit activation record.
pub struct S2aQuantBlob(QuantBlob);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> S2aStatus {
    match e {
        Error::Dimension { .. } | Error::Shape { .. } => S2aStatus::Dimension,
        Error::Numeric(_) | Error::Divergence { .. } => S2aStatus::Numeric,
        Error::Parse { .. } | Error::Format(_) | Error::Json(_) => S2aStatus::Parse,
        Error::Config(_) => S2aStatus::Config,
        Error::Validation(_) | Error::Precondition(_) | Error::UnsupportedKernel(_) => S2aStatus::InvalidArgument,
        _ => S2aStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (S2aStatus, String)>) -> S2aStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => S2aStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside s2a");
            S2aStatus::Panic
        }
    }
}

fn core(e: Error) -> (S2aStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (S2aStatus, String) {
    (S2aStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (S2aStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (S2aStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (S2aStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn s2a_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static, NUL-terminated name of `status`.
#[no_mangle]
pub extern "C" fn s2a_status_name(status: S2aStatus) -> *const c_char {
    let s: &'static CStr = match status {
        S2aStatus::Ok => c"ok",
        S2aStatus::NullPointer => c"null pointer",
        S2aStatus::InvalidArgument => c"invalid argument",
        S2aStatus::Dimension => c"dimension mismatch",
        S2aStatus::Numeric => c"numeric error",
        S2aStatus::Parse => c"parse error",
        S2aStatus::Config => c"configuration error",
        S2aStatus::BufferTooSmall => c"buffer too small",
        S2aStatus::Internal => c"internal error",
        S2aStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Copies `data_len` floats into a new tensor of the given shape.
///
/// # Safety
/// `shape` must point to `rank` values, `data` to `data_len` values and
/// `out` to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn s2a_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f32,
    data_len: usize,
    out: *mut *mut S2aTensor,
) -> S2aStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = slice(shape, rank, "shape")?.to_vec();
        let data = slice(data, data_len, "data")?.to_vec();
        let t = Tensor::new(shape, data).map_err(core)?;
        *out = Box::into_raw(Box::new(S2aTensor(t)));
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from this library that was not yet freed.
#[no_mangle]
pub unsafe extern "C" fn s2a_tensor_free(t: *mut S2aTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Element count, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn s2a_tensor_numel(t: *const S2aTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.numel())
}

/// Copies the tensor's values into `dst`, which must hold `numel` floats.
///
/// # Safety
/// `t` must be a live tensor handle and `dst` writable for `dst_len` floats.
#[no_mangle]
pub unsafe extern "C" fn s2a_tensor_copy_data(t: *const S2aTensor, dst: *mut f32, dst_len: usize) -> S2aStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("tensor"))?;
        let n = t.0.numel();
        if dst_len < n {
            return Err((S2aStatus::BufferTooSmall, format!("need {n} floats, got {dst_len}")));
        }
        if n > 0 {
            if dst.is_null() {
                return Err(null("dst"));
            }
            ptr::copy_nonoverlapping(t.0.data().as_ptr(), dst, n);
        }
        Ok(())
    })
}

/// Per-tensor asymmetric quantization to `bits` bits.
///
/// # Safety
/// `t` must be a live tensor handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn s2a_quantize(t: *const S2aTensor, bits: u8, out: *mut *mut S2aQuantBlob) -> S2aStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("tensor"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let q = quantize(&t.0, bits).map_err(core)?;
        *out = Box::into_raw(Box::new(S2aQuantBlob(q)));
        Ok(())
    })
}

/// # Safety
/// `q` must be a live blob handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn s2a_dequantize(q: *const S2aQuantBlob, out: *mut *mut S2aTensor) -> S2aStatus {
    guard(|| {
        let q = q.as_ref().ok_or_else(|| null("blob"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let t = dequantize(&q.0).map_err(core)?;
        *out = Box::into_raw(Box::new(S2aTensor(t)));
        Ok(())
    })
}

/// # Safety
/// `q` must be null or a blob handle from this library that was not yet freed.
#[no_mangle]
pub unsafe extern "C" fn s2a_quant_blob_free(q: *mut S2aQuantBlob) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// Bytes the blob accounts for when kept as a saved activation.
///
/// # Safety
/// `q` must be null or a live blob handle.
#[no_mangle]
pub unsafe extern "C" fn s2a_quant_blob_storage_bytes(q: *const S2aQuantBlob) -> u64 {
    q.as_ref().map_or(0, |q| q.0.storage_bytes())
}

/// Scale and offset of the affine code mapping.
///
/// # Safety
/// `q` must be a live blob handle; `scale` and `min` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2a_quant_blob_params(q: *const S2aQuantBlob, scale: *mut f32, min: *mut f32) -> S2aStatus {
    guard(|| {
        let q = q.as_ref().ok_or_else(|| null("blob"))?;
        if scale.is_null() || min.is_null() {
            return Err(null("scale/min"));
        }
        *scale = q.0.scale();
        *min = q.0.min();
        Ok(())
    })
}

/// Serializes the blob into `buf`. `written` always receives the required
/// size, so a call with `cap = 0` queries it.
///
/// # Safety
/// `q` must be a live blob handle, `buf` writable for `cap` bytes (or null
/// with `cap = 0`) and `written` writable.
#[no_mangle]
pub unsafe extern "C" fn s2a_quant_blob_to_bytes(
    q: *const S2aQuantBlob,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> S2aStatus {
    guard(|| {
        let q = q.as_ref().ok_or_else(|| null("blob"))?;
        if written.is_null() {
            return Err(null("written"));
        }
        let bytes = q.0.to_bytes();
        *written = bytes.len();
        if cap < bytes.len() {
            return Err((S2aStatus::BufferTooSmall, format!("need {} bytes, got {cap}", bytes.len())));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        Ok(())
    })
}

/// # Safety
/// `buf` must be readable for `len` bytes and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn s2a_quant_blob_from_bytes(buf: *const u8, len: usize, out: *mut *mut S2aQuantBlob) -> S2aStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = slice(buf, len, "buf")?;
        let q = QuantBlob::from_bytes(bytes).map_err(core)?;
        *out = Box::into_raw(Box::new(S2aQuantBlob(q)));
        Ok(())
    })
}

/// Memory report for `arch` (`vit_b_16` or `toy_vit`) tuned with `method`
/// at `batch`, as a JSON string to be released with [`s2a_string_free`].
///
/// # Safety
/// `arch` and `method` must be NUL-terminated strings; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn s2a_estimate_memory_json(
    arch: *const c_char,
    method: *const c_char,
    batch: u64,
    out: *mut *mut c_char,
) -> S2aStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let arch = text(arch, "arch")?;
        let method: Method = text(method, "method")?.parse().map_err(core)?;
        let cfg = ViTConfig::by_name(arch).map_err(core)?;
        let spec = build_model_spec(arch, &cfg, method, default_quantize(method)).map_err(core)?;
        let report = estimate(&spec, batch, AccountingScope::Analysis).map_err(core)?;
        let json = report.to_json().map_err(core)?;
        *out = CString::new(json)
            .map_err(|_| (S2aStatus::Internal, "report contains NUL".to_string()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn s2a_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
