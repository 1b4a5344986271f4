//! C interface to `sscd`.
//!
//! A checkpoint directory is loaded into an opaque [`SscdModel`] handle, which
//! can then run CVA change detection on caller-owned band-sequential buffers.
//! Every fallible call returns an [`SscdStatus`]; the message of the last
//! failure on the calling thread is available from [`sscd_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sscd::detect::{detect_cva, CvaMethod};
use sscd::nn::{load_checkpoint, PretextModel, PretextTask};
use sscd::raster::{normalize_pair, RasterPair};
use sscd::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SscdStatus {
    SscdOk = 0,
    SscdNullPointer = 1,
    SscdInvalidArgument = 2,
    SscdShape = 3,
    SscdData = 4,
    SscdFormat = 5,
    SscdIo = 6,
    SscdTaskMismatch = 7,
    SscdNonFinite = 8,
    SscdDegenerate = 9,
    SscdInternal = 10,
    SscdPanic = 11,
}

pub const SSCD_CVA_OTSU: u32 = 0;
pub const SSCD_CVA_TRIANGLE: u32 = 1;

pub const SSCD_TASK_OVERLAP: u32 = 0;
pub const SSCD_TASK_TRIPLET: u32 = 1;

/// Opaque handle to a loaded pretext model.
pub struct SscdModel {
    inner: PretextModel,
}

/// Shape facts about a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SscdModelInfo {
    pub task: u32,
    pub in_channels: usize,
    /// Deepest layer accepted by `sscd_detect_cva`.
    pub max_layer: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> SscdStatus {
    match e {
        Error::Shape(_) => SscdStatus::SscdShape,
        Error::Contract(_) | Error::Config(_) => SscdStatus::SscdInvalidArgument,
        Error::NonFinite(_) => SscdStatus::SscdNonFinite,
        Error::Data(_) => SscdStatus::SscdData,
        Error::Format { .. } | Error::Json(_) => SscdStatus::SscdFormat,
        Error::Degenerate(_) => SscdStatus::SscdDegenerate,
        Error::TaskMismatch { .. } => SscdStatus::SscdTaskMismatch,
        Error::Io { .. } => SscdStatus::SscdIo,
        Error::Internal(_) => SscdStatus::SscdInternal,
    }
}

/// Runs `f`, recording any error or panic for `sscd_last_error`.
fn guard(f: impl FnOnce() -> Result<(), (SscdStatus, String)>) -> SscdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SscdStatus::SscdOk
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SscdStatus::SscdPanic
        }
    }
}

fn lib(e: Error) -> (SscdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SscdStatus, String) {
    (SscdStatus::SscdNullPointer, format!("{what} is null"))
}

/// Loads a checkpoint directory. On success `*out` owns a handle that must be
/// released with `sscd_model_free`; on failure it is set to null.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sscd_model_load(dir: *const c_char, out: *mut *mut SscdModel) -> SscdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if dir.is_null() {
            return Err(null("dir"));
        }
        let dir = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| (SscdStatus::SscdInvalidArgument, "dir is not valid UTF-8".to_string()))?;
        let (inner, _) = load_checkpoint(dir).map_err(lib)?;
        *out = Box::into_raw(Box::new(SscdModel { inner }));
        Ok(())
    })
}

/// Releases a handle from `sscd_model_load`. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sscd_model_free(model: *mut SscdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sscd_model_info(model: *const SscdModel, out: *mut SscdModelInfo) -> SscdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = SscdModelInfo {
            task: match m.task() {
                PretextTask::Overlap => SSCD_TASK_OVERLAP,
                PretextTask::Triplet => SSCD_TASK_TRIPLET,
            },
            in_channels: m.branch().config().in_channels,
            max_layer: m.max_layer() as u32,
        };
        Ok(())
    })
}

/// CVA change detection on one image pair.
///
/// `t1` and `t2` hold `bands * height * width` floats each, band-sequential
/// (`[band][row][col]`). Both dates are standardized per band before feature
/// extraction, as during training. `out_binary` receives `height * width`
/// 0/1 bytes. `out_score` (same length) and `out_threshold` are optional and
/// receive the normalized magnitude map and the threshold it was cut at. A
/// scene whose magnitude map is constant yields an all-zero map and status OK.
///
/// # Safety
/// Every non-null pointer must be valid for the stated number of elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sscd_detect_cva(
    model: *const SscdModel,
    t1: *const f32,
    t2: *const f32,
    bands: usize,
    height: usize,
    width: usize,
    layer: u32,
    method: u32,
    out_binary: *mut u8,
    out_score: *mut f32,
    out_threshold: *mut f64,
) -> SscdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        if t1.is_null() || t2.is_null() {
            return Err(null("image buffer"));
        }
        if out_binary.is_null() {
            return Err(null("out_binary"));
        }
        let method = match method {
            SSCD_CVA_OTSU => CvaMethod::Otsu,
            SSCD_CVA_TRIANGLE => CvaMethod::Triangle,
            other => return Err((SscdStatus::SscdInvalidArgument, format!("unknown CVA method {other}"))),
        };
        let n = bands
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or((SscdStatus::SscdInvalidArgument, "image size overflows".to_string()))?;
        let shape = [bands, height, width];
        let a = Tensor::new(&shape, std::slice::from_raw_parts(t1, n).to_vec()).map_err(lib)?;
        let b = Tensor::new(&shape, std::slice::from_raw_parts(t2, n).to_vec()).map_err(lib)?;
        let pair = RasterPair::new("ffi", a, b, None).and_then(|p| normalize_pair(&p)).map_err(lib)?;
        let map = detect_cva(&pair, m, layer as usize, method).map_err(lib)?;

        let px = height * width;
        let binary = std::slice::from_raw_parts_mut(out_binary, px);
        for (o, &v) in binary.iter_mut().zip(map.binary.data()) {
            *o = v as u8;
        }
        if !out_score.is_null() {
            std::slice::from_raw_parts_mut(out_score, px).copy_from_slice(map.score.data());
        }
        if let Some(t) = out_threshold.as_mut() {
            *t = map.threshold;
        }
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the full message length
/// excluding the terminator, so a caller can size a second call.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sscd_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sscd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
