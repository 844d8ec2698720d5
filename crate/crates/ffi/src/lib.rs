//! C ABI over the `oshape` simulator.
//!
//! Every fallible call returns an [`OshapeStatus`]; on failure the message
//! is kept per thread and read with [`oshape_last_error`]. Models are opaque
//! handles released with [`oshape_model_free`].

use oshape::checkpoint::Checkpoint;
use oshape::error::Error;
use oshape::metrics::{eval_mi, eval_ser, Detector, TxSystem};
use oshape::ofdm::{papr, AcoModem, NoiseSpec};
use oshape::shaping::ShapingModel;
use oshape::tensor::ComplexVector;
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OshapeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Checkpoint = 3,
    Io = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A trained shaping model loaded from a checkpoint.
pub struct OshapeModel {
    model: ShapingModel,
    n_data: usize,
    snr_db: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> OshapeStatus {
    match e {
        Error::Checkpoint { .. } | Error::Consistency(_) => OshapeStatus::Checkpoint,
        Error::Io(_) => OshapeStatus::Io,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::UndefinedPapr | Error::Degenerate(_) => {
            OshapeStatus::Numeric
        }
        _ => OshapeStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (OshapeStatus, String)>) -> OshapeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            OshapeStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside oshape");
            OshapeStatus::Panic
        }
    }
}

fn lib(e: Error) -> (OshapeStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (OshapeStatus, String) {
    (OshapeStatus::NullPointer, format!("{what} is null"))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len − 1` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn oshape_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Load a shaped-model checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn oshape_model_load(path: *const c_char, out: *mut *mut OshapeModel) -> OshapeStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (OshapeStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ck = Checkpoint::load(Path::new(path)).map_err(lib)?;
        let (model, cfg) = ck.shaping_model().map_err(lib)?;
        *out = Box::into_raw(Box::new(OshapeModel {
            model,
            n_data: cfg.n_data,
            snr_db: cfg.snr_db,
        }));
        Ok(())
    })
}

/// Release a handle from [`oshape_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn oshape_model_free(model: *mut OshapeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Alphabet size M, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn oshape_model_m(model: *const OshapeModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.m())
}

/// SNR (dB) the model was trained at, or NaN for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn oshape_model_snr_db(model: *const OshapeModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.snr_db)
}

/// Write the normalized constellation at `snr_db` into three arrays of
/// length `len ≥ M`.
///
/// # Safety
/// `model` must be a live handle; `re`, `im`, `prob` must each point to
/// `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn oshape_model_constellation(
    model: *const OshapeModel,
    snr_db: f64,
    re: *mut f64,
    im: *mut f64,
    prob: *mut f64,
    len: usize,
) -> OshapeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if re.is_null() || im.is_null() || prob.is_null() {
            return Err(null("output array"));
        }
        let table = m.model.constellation(snr_db).map_err(lib)?;
        if len < table.m() {
            return Err((OshapeStatus::BufferTooSmall, format!("need {} entries, got {len}", table.m())));
        }
        for (k, (&(a, b), &p)) in table.points.iter().zip(&table.probs).enumerate() {
            *re.add(k) = a;
            *im.add(k) = b;
            *prob.add(k) = p;
        }
        Ok(())
    })
}

/// MI lower bound in bits over `n_frames` frames at `snr_db`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn oshape_model_eval_mi(
    model: *const OshapeModel,
    snr_db: f64,
    n_frames: usize,
    seed: u64,
    out: *mut f64,
) -> OshapeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let est = eval_mi(&m.model, m.n_data, snr_db, n_frames, seed, 1).map_err(lib)?;
        *out = est.bits;
        Ok(())
    })
}

/// Symbol error rate of the model's own demapper at `snr_db`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn oshape_model_eval_ser(
    model: *const OshapeModel,
    snr_db: f64,
    n_symbols: usize,
    seed: u64,
    out: *mut f64,
) -> OshapeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let sys = TxSystem::shaped(&m.model, snr_db).map_err(lib)?;
        let noise = NoiseSpec::from_snr_db(snr_db);
        let est = eval_ser(&sys, Detector::Demapper(&m.model.nn3), m.n_data, &noise, n_symbols, seed, 1)
            .map_err(lib)?;
        *out = est.ser();
        Ok(())
    })
}

/// ACO-OFDM modulate `n_data` complex symbols into `4·n_data` real
/// samples, zero-clipped when `clipped` is true.
///
/// # Safety
/// `re` and `im` must point to `n_data` doubles, `out` to `out_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn oshape_aco_modulate(
    n_data: usize,
    re: *const f64,
    im: *const f64,
    clipped: bool,
    out: *mut f64,
    out_len: usize,
) -> OshapeStatus {
    guard(|| {
        if re.is_null() || im.is_null() || out.is_null() {
            return Err(null("array"));
        }
        let modem = AcoModem::new(n_data).map_err(lib)?;
        if out_len < modem.frame_len() {
            return Err((
                OshapeStatus::BufferTooSmall,
                format!("need {} samples, got {out_len}", modem.frame_len()),
            ));
        }
        let data = ComplexVector::new(
            std::slice::from_raw_parts(re, n_data).to_vec(),
            std::slice::from_raw_parts(im, n_data).to_vec(),
        )
        .map_err(lib)?;
        let frame = modem.modulate(&data).map_err(lib)?;
        let src = if clipped { &frame.time_clipped } else { &frame.time_unclipped };
        std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
        Ok(())
    })
}

/// PAPR in dB of `len` real samples.
///
/// # Safety
/// `x` must point to `len` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn oshape_papr_db(x: *const f64, len: usize, out: *mut f64) -> OshapeStatus {
    guard(|| {
        if x.is_null() || out.is_null() {
            return Err(null("array"));
        }
        *out = papr(std::slice::from_raw_parts(x, len)).map_err(lib)?.db;
        Ok(())
    })
}
