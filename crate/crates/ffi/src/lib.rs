//! C ABI over `csad-core`.
//!
//! Every fallible call returns a [`CsadStatus`]; on failure the message is
//! available from [`csad_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Panics never cross the
//! boundary; they surface as [`CsadStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use csad_core::fusion_calibration::{self, FusionError};
use csad_core::histogram_scoring::HistError;
use csad_core::lgst_scoring::{lgst_maps, AnomalyMap, LgstError, TensorManifest};
use csad_core::localization::LocalizationError;
use csad_core::model::{Model, ModelError};
use csad_core::tensor_io::{self, IoError, LabelMap};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsadStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    /// File missing or unreadable.
    Io = 3,
    /// File readable but malformed.
    Format = 4,
    ClassOutOfRange = 5,
    TooFewSamples = 6,
    Unsupported = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

/// A fitted model loaded from a model directory.
pub struct CsadModel {
    model: Model,
    streams: Vec<CString>,
}

/// Per-pixel class map, 0 is background.
pub struct CsadLabelMap(LabelMap);

/// Row-major `f64` anomaly map.
pub struct CsadAnomalyMap(AnomalyMap);

struct Failure(CsadStatus, String);

type FfiResult<T> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn io_status(e: &IoError) -> CsadStatus {
    match e {
        IoError::Io { .. } => CsadStatus::Io,
        IoError::UnsupportedVersion(_) => CsadStatus::Unsupported,
        _ => CsadStatus::Format,
    }
}

fn hist_status(e: &HistError) -> CsadStatus {
    match e {
        HistError::TooFewSamples { .. } => CsadStatus::TooFewSamples,
        HistError::Io(io) => io_status(io),
        HistError::BadBank(_) => CsadStatus::Format,
        HistError::NotPositiveDefinite(_) => CsadStatus::Internal,
        _ => CsadStatus::InvalidArgument,
    }
}

fn lgst_status(e: &LgstError) -> CsadStatus {
    match e {
        LgstError::Io(io) => io_status(io),
        _ => CsadStatus::InvalidArgument,
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match &e {
            ModelError::TooFewSamples { .. } => CsadStatus::TooFewSamples,
            ModelError::InvalidConfig(_) => CsadStatus::InvalidArgument,
            ModelError::UnsupportedVersion(_) => CsadStatus::Unsupported,
            ModelError::ClassOutOfRange { .. } => CsadStatus::ClassOutOfRange,
            ModelError::Hist(h) => hist_status(h),
            ModelError::Fusion(FusionError::TooFewScores { .. }) => CsadStatus::TooFewSamples,
            ModelError::Fusion(_) => CsadStatus::Internal,
            ModelError::Lgst(l) => lgst_status(l),
            ModelError::Localization(LocalizationError::Hist(h)) => hist_status(h),
            ModelError::Localization(LocalizationError::DimMismatch(..)) => CsadStatus::InvalidArgument,
            ModelError::Localization(_) => CsadStatus::Internal,
            ModelError::Io(io) => io_status(io),
        };
        Failure(status, e.to_string())
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure(io_status(&e), e.to_string())
    }
}

impl From<LgstError> for Failure {
    fn from(e: LgstError) -> Self {
        Failure(lgst_status(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> CsadStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsadStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            CsadStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CsadStatus::NullArgument, format!("{what} is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CsadStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn csad_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn csad_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model directory written by `csad fit`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csad_model_load(dir: *const c_char, out: *mut *mut CsadModel) -> CsadStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(dir, "dir")?;
        let model = Model::load(&dir)?;
        let streams = model
            .calibration
            .streams
            .keys()
            .map(|k| CString::new(k.as_str()).expect("stream names have no NUL"))
            .collect();
        put(out, CsadModel { model, streams });
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`csad_model_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn csad_model_free(model: *mut CsadModel) {
    free(model)
}

/// Number of foreground classes; valid label values are `0..=n`. 0 for NULL.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csad_model_n_classes(model: *const CsadModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.n_cls())
}

/// Number of calibrated score streams.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csad_model_stream_count(model: *const CsadModel) -> usize {
    model.as_ref().map_or(0, |m| m.streams.len())
}

/// Name of stream `index` (e.g. `ph_256`, `lgst`), owned by the model; NULL
/// when out of range.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csad_model_stream_name(model: *const CsadModel, index: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.streams.get(index))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Maps a segmenter label map into model classes. Identity when the model
/// carries no remap.
///
/// # Safety
/// Handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csad_model_remap(
    model: *const CsadModel,
    map: *const CsadLabelMap,
    out: *mut *mut CsadLabelMap,
) -> CsadStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let map = as_ref(map, "map")?;
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, CsadLabelMap(m.model.to_model_classes(&map.0)));
        Ok(())
    })
}

/// Scores one label map (already in model classes). `lgst` may be NULL.
///
/// When `streams_out` is non-NULL it receives one raw score per stream in
/// [`csad_model_stream_name`] order, NaN for streams not computed; it must
/// hold at least `csad_model_stream_count` values. `fused_out` may be NULL.
///
/// # Safety
/// Handles must be live; buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn csad_model_score(
    model: *const CsadModel,
    map: *const CsadLabelMap,
    lgst: *const CsadAnomalyMap,
    streams_out: *mut f64,
    streams_len: usize,
    fused_out: *mut f64,
) -> CsadStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let map = as_ref(map, "map")?;
        let lgst = lgst.as_ref().map(|l| &l.0);
        if !streams_out.is_null() && streams_len < m.streams.len() {
            return Err(Failure(
                CsadStatus::BufferTooSmall,
                format!("need {} stream slots, got {streams_len}", m.streams.len()),
            ));
        }
        let raw = m.model.raw_scores(&map.0, lgst)?;
        let fused = fusion_calibration::fuse(&m.model.calibration, raw.iter().map(|(k, v)| (k.as_str(), *v)))
            .map_err(ModelError::from)?;
        if !streams_out.is_null() {
            let out = std::slice::from_raw_parts_mut(streams_out, m.streams.len());
            for (slot, name) in out.iter_mut().zip(m.model.calibration.streams.keys()) {
                *slot = raw.get(name).copied().unwrap_or(f64::NAN);
            }
        }
        if !fused_out.is_null() {
            *fused_out = fused;
        }
        Ok(())
    })
}

/// Anomaly maps for one label map. Any of the three outputs may be NULL.
///
/// # Safety
/// Handles must be live; non-NULL outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn csad_model_localize(
    model: *const CsadModel,
    map: *const CsadLabelMap,
    lgst: *const CsadAnomalyMap,
    patch_hist_out: *mut *mut CsadAnomalyMap,
    lgst_out: *mut *mut CsadAnomalyMap,
    merged_out: *mut *mut CsadAnomalyMap,
) -> CsadStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let map = as_ref(map, "map")?;
        let r = m.model.localize(&map.0, lgst.as_ref().map(|l| &l.0))?;
        for (out, v) in [(patch_hist_out, r.patch_hist_map), (lgst_out, r.lgst_map), (merged_out, r.merged)] {
            if !out.is_null() {
                put(out, CsadAnomalyMap(v));
            }
        }
        Ok(())
    })
}

/// Copies `width * height` class indices into a new label map.
///
/// # Safety
/// `pixels` must hold `width * height` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn csad_label_map_new(
    width: usize,
    height: usize,
    pixels: *const u8,
    out: *mut *mut CsadLabelMap,
) -> CsadStatus {
    guard(|| {
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = width
            .checked_mul(height)
            .ok_or_else(|| Failure(CsadStatus::InvalidArgument, "dimensions overflow".into()))?;
        let px = std::slice::from_raw_parts(pixels, n).to_vec();
        put(out, CsadLabelMap(LabelMap::new(width, height, px)?));
        Ok(())
    })
}

/// Reads an 8-bit or 16-bit binary PGM label map.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn csad_label_map_read(path: *const c_char, out: *mut *mut CsadLabelMap) -> CsadStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        put(out, CsadLabelMap(tensor_io::read_label_map(&path)?));
        Ok(())
    })
}

/// # Safety
/// `map` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csad_label_map_width(map: *const CsadLabelMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.width())
}

/// # Safety
/// `map` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csad_label_map_height(map: *const CsadLabelMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.height())
}

/// Row-major pixels, `width * height` bytes owned by the map.
///
/// # Safety
/// `map` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csad_label_map_pixels(map: *const CsadLabelMap) -> *const u8 {
    map.as_ref().map_or(ptr::null(), |m| m.0.pixels().as_ptr())
}

/// # Safety
/// `map` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn csad_label_map_free(map: *mut CsadLabelMap) {
    free(map)
}

/// Copies `width * height` finite values into a new anomaly map.
///
/// # Safety
/// `values` must hold `width * height` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn csad_anomaly_map_new(
    width: usize,
    height: usize,
    values: *const f64,
    out: *mut *mut CsadAnomalyMap,
) -> CsadStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = width
            .checked_mul(height)
            .ok_or_else(|| Failure(CsadStatus::InvalidArgument, "dimensions overflow".into()))?;
        if n == 0 {
            return Err(Failure(CsadStatus::InvalidArgument, "empty anomaly map".into()));
        }
        let values = std::slice::from_raw_parts(values, n).to_vec();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Failure(CsadStatus::InvalidArgument, format!("non-finite value at index {i}")));
        }
        put(out, CsadAnomalyMap(AnomalyMap { width, height, values }));
        Ok(())
    })
}

/// Combined LGST anomaly map for image `id`, computed from the four tensors
/// listed in a tensor manifest. Tensor paths resolve against the manifest's
/// directory.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn csad_anomaly_map_from_tensors(
    manifest: *const c_char,
    id: *const c_char,
    out: *mut *mut CsadAnomalyMap,
) -> CsadStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(manifest, "manifest")?;
        let id = path_arg(id, "id")?;
        let id = id.to_str().expect("checked UTF-8");
        let tm = TensorManifest::read(&path)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        put(out, CsadAnomalyMap(lgst_maps(&tm.load(dir, id)?)?.combined));
        Ok(())
    })
}

/// # Safety
/// `map` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csad_anomaly_map_width(map: *const CsadAnomalyMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.width)
}

/// # Safety
/// `map` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csad_anomaly_map_height(map: *const CsadAnomalyMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.height)
}

/// Row-major values, `width * height` doubles owned by the map.
///
/// # Safety
/// `map` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csad_anomaly_map_values(map: *const CsadAnomalyMap) -> *const f64 {
    map.as_ref().map_or(ptr::null(), |m| m.0.values.as_ptr())
}

/// Writes the map as a 16-bit PGM plus its JSON range sidecar.
///
/// # Safety
/// `map` must be live; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn csad_anomaly_map_write16(map: *const CsadAnomalyMap, path: *const c_char) -> CsadStatus {
    guard(|| {
        let m = as_ref(map, "map")?;
        let path = path_arg(path, "path")?;
        tensor_io::write_map16(m.0.width, m.0.height, &m.0.values, &path)?;
        Ok(())
    })
}

/// # Safety
/// `map` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn csad_anomaly_map_free(map: *mut CsadAnomalyMap) {
    free(map)
}
