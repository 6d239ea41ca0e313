//! C ABI over the qprobe toolkit.
//!
//! Every fallible call returns a [`QpStatus`]; on failure the message is kept
//! per thread and read back with [`qp_last_error_message`]. Objects cross the
//! boundary as opaque handles released by their matching `_free` function.
//! Strings returned to the caller are owned by the caller and released with
//! [`qp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use qprobe::error::Error;
use qprobe::forge::ForgeConfig;
use qprobe::model::{BenchmarkItem, DefectRecord, Raster, Region};

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Ok = 0,
    Io = 1,
    Format = 2,
    Parse = 3,
    Validation = 4,
    Argument = 5,
    Shape = 6,
    Forge = 7,
    Region = 8,
    MissingIds = 9,
    Network = 10,
    Schema = 11,
    MissingEntry = 12,
    NullPointer = 13,
    Utf8 = 14,
    Panic = 15,
}

impl From<&Error> for QpStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => QpStatus::Io,
            Error::Format(_) => QpStatus::Format,
            Error::Parse(_) => QpStatus::Parse,
            Error::Validation(_) => QpStatus::Validation,
            Error::Argument(_) => QpStatus::Argument,
            Error::Shape(_) => QpStatus::Shape,
            Error::Forge(_) => QpStatus::Forge,
            Error::Region(_) => QpStatus::Region,
            Error::MissingIds(_) => QpStatus::MissingIds,
            Error::Network(_) => QpStatus::Network,
            Error::Schema(_) => QpStatus::Schema,
            Error::MissingEntry(_) => QpStatus::MissingEntry,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<(QpStatus, CString)>> = const { RefCell::new(None) };
}

fn set_error(code: QpStatus, msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some((code, c)));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(QpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(QpStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

/// Runs `f`, recording any error or panic in the thread-local slot.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> QpStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QpStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(code, msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(QpStatus::Panic, format!("panic: {msg}"));
            QpStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(QpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(QpStatus::Utf8, format!("{what}: {e}")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> FfiResult<()> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn json_arg<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> FfiResult<T> {
    serde_json::from_str(text).map_err(|e| Failure(QpStatus::Parse, format!("{what}: {e}")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes replaced").into_raw()
}

/// Code of the most recent failure on this thread, `Ok` if the last call succeeded.
#[no_mangle]
pub extern "C" fn qp_last_error_code() -> QpStatus {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(QpStatus::Ok, |(code, _)| *code))
}

/// Message of the most recent failure on this thread, or NULL.
///
/// The pointer stays valid until the next qprobe call on the same thread.
#[no_mangle]
pub extern "C" fn qp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |(_, c)| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from a qprobe function that returns an owned string, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn qp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opaque image handle.
pub struct QpRaster(Raster);

/// # Safety
/// `data` must hold `width * height * channels` readable doubles in row-major,
/// channel-interleaved order; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qp_raster_new(
    width: usize,
    height: usize,
    channels: usize,
    data: *const f64,
    out: *mut *mut QpRaster,
) -> QpStatus {
    guard(|| {
        let n = width.saturating_mul(height).saturating_mul(channels);
        let samples = slice_arg(data, n, "data")?.to_vec();
        let r = Raster::new(width, height, channels, samples)?;
        write_out(out, Box::into_raw(Box::new(QpRaster(r))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qp_raster_load(path: *const c_char, out: *mut *mut QpRaster) -> QpStatus {
    guard(|| {
        let r = qprobe::model::load_raster(str_arg(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(QpRaster(r))), "out")
    })
}

/// # Safety
/// `raster` must be a live handle; `path` a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn qp_raster_save(raster: *const QpRaster, path: *const c_char) -> QpStatus {
    guard(|| {
        let r = raster.as_ref().ok_or_else(|| null("raster"))?;
        qprobe::model::save_raster(&r.0, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Width, height and channel count. Any output pointer may be NULL.
///
/// # Safety
/// `raster` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qp_raster_shape(
    raster: *const QpRaster,
    width: *mut usize,
    height: *mut usize,
    channels: *mut usize,
) -> QpStatus {
    guard(|| {
        let r = &raster.as_ref().ok_or_else(|| null("raster"))?.0;
        for (p, v) in [(width, r.width()), (height, r.height()), (channels, r.channels())] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Borrowed pointer to the samples, valid while the handle lives.
///
/// # Safety
/// `raster` must be a live handle and `len` writable.
#[no_mangle]
pub unsafe extern "C" fn qp_raster_data(raster: *const QpRaster, data: *mut *const f64, len: *mut usize) -> QpStatus {
    guard(|| {
        let r = &raster.as_ref().ok_or_else(|| null("raster"))?.0;
        write_out(data, r.data().as_ptr(), "data")?;
        write_out(len, r.data().len(), "len")
    })
}

/// # Safety
/// `raster` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn qp_raster_free(raster: *mut QpRaster) {
    if !raster.is_null() {
        drop(Box::from_raw(raster));
    }
}

/// Opaque benchmark manifest.
pub struct QpManifest(Vec<BenchmarkItem>);

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qp_manifest_read(path: *const c_char, out: *mut *mut QpManifest) -> QpStatus {
    guard(|| {
        let items = qprobe::model::read_manifest(str_arg(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(QpManifest(items))), "out")
    })
}

/// # Safety
/// `json` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qp_manifest_parse(json: *const c_char, out: *mut *mut QpManifest) -> QpStatus {
    guard(|| {
        let items = qprobe::model::parse_manifest(str_arg(json, "json")?)?;
        write_out(out, Box::into_raw(Box::new(QpManifest(items))), "out")
    })
}

/// Number of items, 0 for NULL.
///
/// # Safety
/// `manifest` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn qp_manifest_len(manifest: *const QpManifest) -> usize {
    manifest.as_ref().map_or(0, |m| m.0.len())
}

/// Item `index` as a JSON object string owned by the caller.
///
/// # Safety
/// `manifest` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qp_manifest_item_json(manifest: *const QpManifest, index: usize, out: *mut *mut c_char) -> QpStatus {
    guard(|| {
        let m = &manifest.as_ref().ok_or_else(|| null("manifest"))?.0;
        let item = m.get(index).ok_or_else(|| {
            Failure(QpStatus::Argument, format!("index {index} out of range for {} items", m.len()))
        })?;
        let text = serde_json::to_string(item).expect("items serialize");
        write_out(out, into_c_string(text), "out")
    })
}

/// # Safety
/// `manifest` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn qp_manifest_free(manifest: *mut QpManifest) {
    if !manifest.is_null() {
        drop(Box::from_raw(manifest));
    }
}

/// Degrades `source` into a new raster plus its manifest entry as JSON.
///
/// `config_json` may be NULL for the default forge settings.
///
/// # Safety
/// `source` must be a live handle, string arguments NUL-terminated UTF-8, and
/// both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn qp_forge_item(
    source: *const QpRaster,
    config_json: *const c_char,
    id: *const c_char,
    out_raster: *mut *mut QpRaster,
    out_item_json: *mut *mut c_char,
) -> QpStatus {
    guard(|| {
        let src = &source.as_ref().ok_or_else(|| null("source"))?.0;
        let cfg: ForgeConfig = if config_json.is_null() {
            ForgeConfig::default()
        } else {
            json_arg(str_arg(config_json, "config_json")?, "config_json")?
        };
        if out_raster.is_null() || out_item_json.is_null() {
            return Err(null("output"));
        }
        let (img, item) = qprobe::forge::forge_item(src, &cfg, str_arg(id, "id")?)?;
        out_raster.write(Box::into_raw(Box::new(QpRaster(img))));
        out_item_json.write(into_c_string(serde_json::to_string(&item).expect("items serialize")));
        Ok(())
    })
}

/// MOS of a defect list given as a JSON array.
///
/// # Safety
/// `defects_json` must be NUL-terminated UTF-8; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qp_synthesize_mos(defects_json: *const c_char, image_area: f64, out: *mut f64) -> QpStatus {
    guard(|| {
        let defects: Vec<DefectRecord> = json_arg(str_arg(defects_json, "defects_json")?, "defects_json")?;
        for d in &defects {
            d.validate()?;
        }
        if !(image_area > 0.0) {
            return Err(Failure(QpStatus::Argument, format!("image area must be > 0, got {image_area}")));
        }
        write_out(out, qprobe::forge::synthesize_mos(&defects, image_area), "out")
    })
}

/// # Safety
/// `preds` and `gts` must each hold `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qp_srcc(preds: *const f64, gts: *const f64, n: usize, out: *mut f64) -> QpStatus {
    guard(|| {
        let v = qprobe::eval::srcc(slice_arg(preds, n, "preds")?, slice_arg(gts, n, "gts")?)?;
        write_out(out, v, "out")
    })
}

/// # Safety
/// `preds` and `gts` must each hold `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qp_plcc(preds: *const f64, gts: *const f64, n: usize, out: *mut f64) -> QpStatus {
    guard(|| {
        let v = qprobe::eval::plcc(slice_arg(preds, n, "preds")?, slice_arg(gts, n, "gts")?)?;
        write_out(out, v, "out")
    })
}

/// Per-source-tag evaluation report as JSON.
///
/// `predictions_json` is an array of `{"id": .., "score": ..}` objects.
///
/// # Safety
/// `manifest` must be a live handle, `predictions_json` NUL-terminated UTF-8,
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qp_evaluate(
    manifest: *const QpManifest,
    predictions_json: *const c_char,
    out: *mut *mut c_char,
) -> QpStatus {
    guard(|| {
        let m = &manifest.as_ref().ok_or_else(|| null("manifest"))?.0;
        let preds: Vec<qprobe::eval::Prediction> =
            json_arg(str_arg(predictions_json, "predictions_json")?, "predictions_json")?;
        let report = qprobe::eval::evaluate(&preds, m)?;
        write_out(out, into_c_string(report.to_json()), "out")
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qp_acc_reward(s_pred: f64, s_mos: f64, tau: f64, out: *mut f64) -> QpStatus {
    guard(|| write_out(out, qprobe::rewards::acc_reward(s_pred, s_mos, tau)?, "out"))
}

/// Intersection over union of two boxes.
#[no_mangle]
pub extern "C" fn qp_iou(ax: u32, ay: u32, aw: u32, ah: u32, bx: u32, by: u32, bw: u32, bh: u32) -> f64 {
    let a = Region { x: ax, y: ay, w: aw, h: ah };
    let b = Region { x: bx, y: by, w: bw, h: bh };
    qprobe::rewards::iou(&a, &b)
}

/// 1 when `trace` follows the reasoning-trace grammar, else 0. NULL scores 0.
///
/// # Safety
/// `trace` must be NUL-terminated or NULL.
#[no_mangle]
pub unsafe extern "C" fn qp_format_reward(trace: *const c_char) -> f64 {
    if trace.is_null() {
        return 0.0;
    }
    CStr::from_ptr(trace).to_str().map_or(0.0, qprobe::rewards::format_reward)
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qp_rank_reward(p: f64, y: f64, out: *mut f64) -> QpStatus {
    guard(|| write_out(out, qprobe::rank::rank_reward(p, y)?, "out"))
}

/// Thurstone rewards of group `i` against group `j`, written to `out` (`k` slots).
///
/// # Safety
/// `group_i`, `group_j` and `out` must each hold `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn qp_pair_rewards(
    group_i: *const f64,
    group_j: *const f64,
    k: usize,
    y: f64,
    gamma: f64,
    out: *mut f64,
) -> QpStatus {
    guard(|| {
        let gi = qprobe::rank::ScoreGroup::new(slice_arg(group_i, k, "group_i")?.to_vec())?;
        let gj = qprobe::rank::ScoreGroup::new(slice_arg(group_j, k, "group_j")?.to_vec())?;
        let r = qprobe::rank::pair_rewards(&gi, &gj, y, gamma)?;
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(&r);
        Ok(())
    })
}

/// Group-normalized advantages, written to `out` (`n` slots).
///
/// # Safety
/// `rewards` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn qp_group_advantages(rewards: *const f64, n: usize, out: *mut f64) -> QpStatus {
    guard(|| {
        let a = qprobe::grpo::group_advantages(slice_arg(rewards, n, "rewards")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&a);
        Ok(())
    })
}

/// Largest absolute difference between `raster` and its Haar round trip.
///
/// # Safety
/// `raster` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qp_wavelet_roundtrip_error(raster: *const QpRaster, levels: usize, out: *mut f64) -> QpStatus {
    guard(|| {
        let r = &raster.as_ref().ok_or_else(|| null("raster"))?.0;
        let back = qprobe::wavelet::idwt2(&qprobe::wavelet::dwt2(r, levels)?)?;
        let err = r
            .luma()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        write_out(out, err, "out")
    })
}
