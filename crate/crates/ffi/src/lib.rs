//! C ABI over the ldit attention kernels.
//!
//! Matrices and attention instances cross the boundary as opaque handles.
//! The caller owns every handle it receives and releases it with the matching
//! `_free` function. Fallible calls return an [`LditStatus`]; on failure the
//! out-pointer is set to null and a message is kept per thread until the next
//! call, readable through [`ldit_last_error_message`]. Panics never unwind
//! into C; they surface as [`LditStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ldit::attention::{attention_exact, grad_exact, grad_fast, inference_fast, loss0, AttentionInstance, FastResult};
use ldit::{DenseMatrix, Error};

/// Outcome of a fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LditStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Overflow = 3,
    Degenerate = 4,
    OutOfRange = 5,
    NonFinite = 6,
    Construction = 7,
    InvalidArgument = 8,
    Io = 9,
    Panic = 10,
}

/// Row-major dense matrix of doubles.
pub struct LditMatrix(DenseMatrix);

/// Attention instance: inputs `A1, A2, A3`, weights `W, W_OV` and target `Y`.
pub struct LditAttention(AttentionInstance);

/// Diagnostics of a low-rank call.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LditFastInfo {
    /// Taylor degree of the feature map.
    pub degree: usize,
    /// Rank of the softmax factors.
    pub rank: usize,
    /// Certified max-norm bound on the error of the returned matrix.
    pub err_bound: f64,
    pub flops: u64,
    /// High-water mark of live floats in the factorized path.
    pub peak_floats: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(LditStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension { .. } => LditStatus::Dimension,
            Error::Overflow { .. } => LditStatus::Overflow,
            Error::Degenerate { .. } | Error::Singular(_) => LditStatus::Degenerate,
            Error::OutOfRange(_) => LditStatus::OutOfRange,
            Error::NonFinite(_) => LditStatus::NonFinite,
            Error::Construction(_) => LditStatus::Construction,
            Error::Config(_) | Error::Json(_) => LditStatus::InvalidArgument,
            Error::Io(_) => LditStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LditStatus::NullPointer, format!("{what} is null"))
}

fn set_error(msg: Option<String>) {
    // interior NULs would truncate the C string, so drop them
    let msg = msg.map(|m| CString::new(m.replace('\0', "")).expect("NULs removed"));
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LditStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(LditStatus::Panic, format!("panic: {msg}")))
    });
    match outcome {
        Ok(()) => {
            set_error(None);
            LditStatus::Ok
        }
        Err(Failure(status, msg)) => {
            set_error(Some(msg));
            status
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Clears `*out`, runs `make`, and stores the boxed result on success.
unsafe fn emit<T>(out: *mut *mut T, make: impl FnOnce() -> Result<T, Failure>) -> LditStatus {
    if out.is_null() {
        return guard(|| Err(null("out")));
    }
    *out = ptr::null_mut();
    guard(|| {
        *out = Box::into_raw(Box::new(make()?));
        Ok(())
    })
}

fn info_of(r: &FastResult) -> LditFastInfo {
    LditFastInfo {
        degree: r.degree,
        rank: r.rank,
        err_bound: r.err_bound,
        flops: r.meter.flops,
        peak_floats: r.meter.peak_floats,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ldit_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Message of the last failed call on this thread, or null if the last call
/// succeeded. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ldit_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Copies `rows·cols` row-major doubles into a new matrix.
///
/// # Safety
/// `data` must point to `rows·cols` readable doubles (it may be null when the
/// product is zero) and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ldit_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut LditMatrix,
) -> LditStatus {
    emit(out, || {
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(LditStatus::InvalidArgument, format!("{rows}x{cols} overflows")))?;
        let values = if len == 0 {
            Vec::new()
        } else if data.is_null() {
            return Err(null("data"));
        } else {
            std::slice::from_raw_parts(data, len).to_vec()
        };
        Ok(LditMatrix(DenseMatrix::new(rows, cols, values)?))
    })
}

/// Releases a matrix. Null is ignored.
///
/// # Safety
/// `m` must be null or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn ldit_matrix_free(m: *mut LditMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Row count, 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ldit_matrix_rows(m: *const LditMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// Column count, 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ldit_matrix_cols(m: *const LditMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Borrowed view of the row-major entries, valid while `m` lives.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ldit_matrix_data(m: *const LditMatrix) -> *const f64 {
    m.as_ref().map_or(ptr::null(), |m| m.0.as_slice().as_ptr())
}

/// Copies the entries into `buf`, which must hold exactly `rows·cols` doubles.
///
/// # Safety
/// `m` must be a live handle and `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ldit_matrix_copy(m: *const LditMatrix, buf: *mut f64, len: usize) -> LditStatus {
    guard(|| {
        let m = borrow(m, "matrix")?;
        let src = m.0.as_slice();
        if len != src.len() {
            return Err(Failure(
                LditStatus::Dimension,
                format!("buffer holds {len} doubles, matrix has {}", src.len()),
            ));
        }
        if len > 0 {
            if buf.is_null() {
                return Err(null("buf"));
            }
            std::slice::from_raw_parts_mut(buf, len).copy_from_slice(src);
        }
        Ok(())
    })
}

/// Cross-attention instance. The inputs are copied; the caller keeps ownership
/// of its matrix handles.
///
/// # Safety
/// Every pointer must be a live matrix handle and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ldit_attention_new_cross(
    a1: *const LditMatrix,
    a2: *const LditMatrix,
    a3: *const LditMatrix,
    w: *const LditMatrix,
    w_ov: *const LditMatrix,
    y: *const LditMatrix,
    out: *mut *mut LditAttention,
) -> LditStatus {
    emit(out, || {
        let get = |p, what| borrow(p, what).map(|m: &LditMatrix| m.0.clone());
        let inst = AttentionInstance::cross(
            get(a1, "a1")?,
            get(a2, "a2")?,
            get(a3, "a3")?,
            get(w, "w")?,
            get(w_ov, "w_ov")?,
            get(y, "y")?,
        )?;
        Ok(LditAttention(inst))
    })
}

/// Self-attention instance with `A1 = A2 = x`.
///
/// # Safety
/// Every pointer must be a live matrix handle and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ldit_attention_new_self(
    x: *const LditMatrix,
    a3: *const LditMatrix,
    w: *const LditMatrix,
    w_ov: *const LditMatrix,
    y: *const LditMatrix,
    out: *mut *mut LditAttention,
) -> LditStatus {
    emit(out, || {
        let get = |p, what| borrow(p, what).map(|m: &LditMatrix| m.0.clone());
        let inst =
            AttentionInstance::self_attention(get(x, "x")?, get(a3, "a3")?, get(w, "w")?, get(w_ov, "w_ov")?, get(y, "y")?)?;
        Ok(LditAttention(inst))
    })
}

/// Replaces `W` by `W_Kᵀ W_Q` and keeps the split for the fast paths.
///
/// # Safety
/// `inst`, `w_k` and `w_q` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn ldit_attention_set_split(
    inst: *mut LditAttention,
    w_k: *const LditMatrix,
    w_q: *const LditMatrix,
) -> LditStatus {
    guard(|| {
        let inst = inst.as_mut().ok_or_else(|| null("instance"))?;
        let (w_k, w_q) = (borrow(w_k, "w_k")?, borrow(w_q, "w_q")?);
        inst.0 = inst.0.clone().with_split(w_k.0.clone(), w_q.0.clone())?;
        Ok(())
    })
}

/// Releases an instance. Null is ignored.
///
/// # Safety
/// `inst` must be null or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn ldit_attention_free(inst: *mut LditAttention) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

/// Exact attention output `W_OV A3 fᵀ` (d×L).
///
/// # Safety
/// `inst` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ldit_attention_exact(inst: *const LditAttention, out: *mut *mut LditMatrix) -> LditStatus {
    emit(out, || Ok(LditMatrix(attention_exact(&borrow(inst, "instance")?.0)?)))
}

/// Loss `½‖W_OV A3 fᵀ − Y‖²_F`.
///
/// # Safety
/// `inst` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ldit_attention_loss(inst: *const LditAttention, out: *mut f64) -> LditStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = loss0(&borrow(inst, "instance")?.0)?;
        Ok(())
    })
}

/// Exact gradient of the loss with respect to `W` (d×d).
///
/// # Safety
/// `inst` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ldit_attention_grad_exact(inst: *const LditAttention, out: *mut *mut LditMatrix) -> LditStatus {
    emit(out, || Ok(LditMatrix(grad_exact(&borrow(inst, "instance")?.0)?)))
}

unsafe fn fast_call(
    inst: *const LditAttention,
    eps_target: f64,
    out: *mut *mut LditMatrix,
    info: *mut LditFastInfo,
    run: fn(&AttentionInstance, f64) -> ldit::Result<FastResult>,
) -> LditStatus {
    emit(out, || {
        let r = run(&borrow(inst, "instance")?.0, eps_target)?;
        if let Some(info) = info.as_mut() {
            *info = info_of(&r);
        }
        Ok(LditMatrix(r.value))
    })
}

/// Low-rank attention output within `eps_target` in max norm.
/// `info` may be null.
///
/// # Safety
/// `inst` must be a live handle, `out` a valid pointer and `info` null or valid.
#[no_mangle]
pub unsafe extern "C" fn ldit_attention_inference_fast(
    inst: *const LditAttention,
    eps_target: f64,
    out: *mut *mut LditMatrix,
    info: *mut LditFastInfo,
) -> LditStatus {
    fast_call(inst, eps_target, out, info, inference_fast)
}

/// Low-rank gradient with respect to `W` within `eps_target` in max norm.
/// `info` may be null.
///
/// # Safety
/// `inst` must be a live handle, `out` a valid pointer and `info` null or valid.
#[no_mangle]
pub unsafe extern "C" fn ldit_attention_grad_fast(
    inst: *const LditAttention,
    eps_target: f64,
    out: *mut *mut LditMatrix,
    info: *mut LditFastInfo,
) -> LditStatus {
    fast_call(inst, eps_target, out, info, grad_fast)
}
