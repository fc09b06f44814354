//! C ABI over `nmsforge`.
//!
//! Every function returns an [`NmsforgeStatus`]; on failure a message is
//! available from [`nmsforge_last_error`] until the next call on the same
//! thread. Configs are opaque handles owned by the caller.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nmsforge::config::parse_schedule;
use nmsforge::metrics::{overlap_ids, OverlapMode};
use nmsforge::{Assignment, BoundingBox, DetId, Detection, Engine, NmsConfig, NmsError, StageKind};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmsforgeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InvalidConfig = 3,
    Unsupported = 4,
    BufferTooSmall = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmsforgeEngine {
    Greedy = 0,
    Psrr = 1,
    LegacySingle = 2,
    LegacyRatio = 3,
    LegacyScale = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmsforgeAssignment {
    Max = 0,
    Sum = 1,
    Random = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmsforgeOverlapMode {
    Jaccard = 0,
    Recall = 1,
}

/// One detection. The anchor fields are read only when `has_anchor` is
/// non-zero; legacy engines require them.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NmsforgeDetection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub class_id: u32,
    pub det_id: u32,
    pub has_anchor: u8,
    pub anchor_x1: f64,
    pub anchor_y1: f64,
    pub anchor_x2: f64,
    pub anchor_y2: f64,
    pub anchor_channel: u32,
}

/// Opaque engine configuration.
pub struct NmsforgeConfig {
    inner: NmsConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &NmsError) -> NmsforgeStatus {
    match err {
        NmsError::InvalidInput { .. } | NmsError::Parse { .. } => NmsforgeStatus::InvalidInput,
        NmsError::InvalidConfig(_) => NmsforgeStatus::InvalidConfig,
        NmsError::Unsupported(_) => NmsforgeStatus::Unsupported,
        _ => NmsforgeStatus::Internal,
    }
}

fn fail(status: NmsforgeStatus, msg: impl Into<String>) -> NmsforgeStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, records errors and turns panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), NmsforgeStatus>) -> NmsforgeStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NmsforgeStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(NmsforgeStatus::Internal, "internal panic"),
    }
}

fn from_core(err: NmsError) -> NmsforgeStatus {
    fail(status_of(&err), err.to_string())
}

unsafe fn config_mut<'a>(cfg: *mut NmsforgeConfig) -> Result<&'a mut NmsConfig, NmsforgeStatus> {
    cfg.as_mut().map(|c| &mut c.inner).ok_or_else(|| fail(NmsforgeStatus::NullPointer, "config is null"))
}

unsafe fn input_slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], NmsforgeStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(NmsforgeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, n))
}

/// Message of the last failed call on this thread, or null.
/// The pointer is valid until the next call into this library.
#[no_mangle]
pub extern "C" fn nmsforge_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn nmsforge_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New config with default settings. Free with [`nmsforge_config_free`].
#[no_mangle]
pub extern "C" fn nmsforge_config_new() -> *mut NmsforgeConfig {
    Box::into_raw(Box::new(NmsforgeConfig { inner: NmsConfig::default() }))
}

/// # Safety
/// `cfg` must come from [`nmsforge_config_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_config_free(cfg: *mut NmsforgeConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_config_set_alpha(cfg: *mut NmsforgeConfig, alpha: f64) -> NmsforgeStatus {
    guard(|| {
        config_mut(cfg)?.alpha = alpha;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_config_set_beta(cfg: *mut NmsforgeConfig, beta: f64) -> NmsforgeStatus {
    guard(|| {
        config_mut(cfg)?.beta = beta;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_config_set_image_size(cfg: *mut NmsforgeConfig, width: f64, height: f64) -> NmsforgeStatus {
    guard(|| {
        let c = config_mut(cfg)?;
        c.image_w = width;
        c.image_h = height;
        Ok(())
    })
}

/// Anchor areas in pixels², strictly increasing.
///
/// # Safety
/// `cfg` must be a live handle and `scales` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_config_set_scales(cfg: *mut NmsforgeConfig, scales: *const f64, n: usize) -> NmsforgeStatus {
    guard(|| {
        let v = input_slice(scales, n, "scales")?.to_vec();
        config_mut(cfg)?.scales = v;
        Ok(())
    })
}

/// Height:width ratios, strictly increasing.
///
/// # Safety
/// `cfg` must be a live handle and `ratios` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_config_set_ratios(cfg: *mut NmsforgeConfig, ratios: *const f64, n: usize) -> NmsforgeStatus {
    guard(|| {
        let v = input_slice(ratios, n, "ratios")?.to_vec();
        config_mut(cfg)?.ratios = v;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_config_set_top_k(cfg: *mut NmsforgeConfig, top_k: usize) -> NmsforgeStatus {
    guard(|| {
        config_mut(cfg)?.top_k = top_k;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_config_set_greedy_iou(cfg: *mut NmsforgeConfig, iou: f64) -> NmsforgeStatus {
    guard(|| {
        config_mut(cfg)?.greedy_iou = iou;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_config_set_assignment(cfg: *mut NmsforgeConfig, a: NmsforgeAssignment) -> NmsforgeStatus {
    guard(|| {
        config_mut(cfg)?.assignment = match a {
            NmsforgeAssignment::Max => Assignment::Max,
            NmsforgeAssignment::Sum => Assignment::Sum,
            NmsforgeAssignment::Random => Assignment::Random,
        };
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_config_set_seed(cfg: *mut NmsforgeConfig, seed: u64) -> NmsforgeStatus {
    guard(|| {
        config_mut(cfg)?.seed = seed;
        Ok(())
    })
}

/// Pooling schedule such as `"single+ratio+scale+all"`.
///
/// # Safety
/// `cfg` must be a live handle and `schedule` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_config_set_schedule(
    cfg: *mut NmsforgeConfig,
    schedule: *const c_char,
    shifted: bool,
) -> NmsforgeStatus {
    guard(|| {
        if schedule.is_null() {
            return Err(fail(NmsforgeStatus::NullPointer, "schedule is null"));
        }
        let s = CStr::from_ptr(schedule)
            .to_str()
            .map_err(|_| fail(NmsforgeStatus::InvalidConfig, "schedule is not utf-8"))?;
        let stages = parse_schedule(s, shifted).map_err(from_core)?;
        config_mut(cfg)?.schedule = stages;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_config_validate(cfg: *mut NmsforgeConfig) -> NmsforgeStatus {
    guard(|| config_mut(cfg)?.validate().map_err(from_core))
}

fn to_detection(d: &NmsforgeDetection) -> Detection {
    let det = Detection::new(d.det_id, BoundingBox::new(d.x1, d.y1, d.x2, d.y2), d.score, d.class_id);
    if d.has_anchor != 0 {
        det.with_source(
            BoundingBox::new(d.anchor_x1, d.anchor_y1, d.anchor_x2, d.anchor_y2),
            d.anchor_channel as usize,
        )
    } else {
        det
    }
}

fn engine_of(e: NmsforgeEngine) -> Engine {
    match e {
        NmsforgeEngine::Greedy => Engine::Greedy,
        NmsforgeEngine::Psrr => Engine::Psrr,
        NmsforgeEngine::LegacySingle => Engine::Legacy(StageKind::Single),
        NmsforgeEngine::LegacyRatio => Engine::Legacy(StageKind::Ratio),
        NmsforgeEngine::LegacyScale => Engine::Legacy(StageKind::Scale),
    }
}

/// Suppresses `dets` class by class and writes the kept det_ids, ordered
/// by class and then by descending score, into `out_ids`.
///
/// `*out_len` always receives the number of kept boxes. If it exceeds
/// `out_cap`, nothing is written and `BufferTooSmall` is returned.
///
/// # Safety
/// `cfg` must be a live handle, `dets` must point to `n_dets` detections,
/// `out_ids` to `out_cap` writable u32 and `out_len` to a writable usize.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_run(
    cfg: *const NmsforgeConfig,
    engine: NmsforgeEngine,
    dets: *const NmsforgeDetection,
    n_dets: usize,
    out_ids: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> NmsforgeStatus {
    guard(|| {
        let config = &cfg.as_ref().ok_or_else(|| fail(NmsforgeStatus::NullPointer, "config is null"))?.inner;
        if out_len.is_null() {
            return Err(fail(NmsforgeStatus::NullPointer, "out_len is null"));
        }
        let dets: Vec<Detection> = input_slice(dets, n_dets, "dets")?.iter().map(to_detection).collect();
        let kept = engine_of(engine).run_all_classes(&dets, config).map_err(from_core)?;
        let ids: Vec<DetId> = kept.values().flat_map(|k| k.ids()).collect();
        *out_len = ids.len();
        if ids.len() > out_cap {
            return Err(fail(
                NmsforgeStatus::BufferTooSmall,
                format!("{} ids kept, buffer holds {out_cap}", ids.len()),
            ));
        }
        if !ids.is_empty() {
            if out_ids.is_null() {
                return Err(fail(NmsforgeStatus::NullPointer, "out_ids is null"));
            }
            slice::from_raw_parts_mut(out_ids, ids.len()).copy_from_slice(&ids);
        }
        Ok(())
    })
}

/// Overlap between two kept-id sets; `b` is the reference for `Recall`.
/// Duplicate ids are counted once.
///
/// # Safety
/// `a` and `b` must point to `na` and `nb` u32, `out` to a writable double.
#[no_mangle]
pub unsafe extern "C" fn nmsforge_overlap(
    a: *const u32,
    na: usize,
    b: *const u32,
    nb: usize,
    mode: NmsforgeOverlapMode,
    out: *mut f64,
) -> NmsforgeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(NmsforgeStatus::NullPointer, "out is null"));
        }
        let a: BTreeSet<DetId> = input_slice(a, na, "a")?.iter().copied().collect();
        let b: BTreeSet<DetId> = input_slice(b, nb, "b")?.iter().copied().collect();
        let mode = match mode {
            NmsforgeOverlapMode::Jaccard => OverlapMode::Jaccard,
            NmsforgeOverlapMode::Recall => OverlapMode::Recall,
        };
        *out = overlap_ids(&a, &b, mode).ratio;
        Ok(())
    })
}
