//! C ABI for `stc-vis`.
//!
//! Handles are opaque pointers created by `*_new`/`*_load` and released with
//! the matching `*_free`. Every fallible call returns an [`StcStatus`]; on
//! failure [`stc_last_error_message`] describes the error for the calling
//! thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use stc_vis::datagen::Frame;
use stc_vis::inference::{decode_detections, AssocParams, DecodeParams, TrackPrediction, VideoTracker};
use stc_vis::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use stc_vis::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StcStatus {
    StcOk = 0,
    StcErrNullPointer = 1,
    StcErrInvalidArgument = 2,
    StcErrConfig = 3,
    StcErrShape = 4,
    StcErrFormat = 5,
    StcErrIo = 6,
    StcErrRuntime = 7,
    StcErrPanic = 8,
}

/// Opaque model handle.
pub struct StcModel {
    model: Arc<Model>,
}

/// Opaque online tracker bound to one video.
pub struct StcTracker {
    model: Arc<Model>,
    decode: DecodeParams,
    tracker: VideoTracker,
    frame_size: Option<(usize, usize)>,
    tracks: Vec<TrackPrediction>,
}

/// Detection and association thresholds.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StcTrackerParams {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub top_t: usize,
    pub w_iou: f64,
    pub w_cls: f64,
    pub new_thresh: f64,
}

/// Summary of one finalized track.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StcTrack {
    pub track_id: u64,
    pub category: u32,
    pub score: f64,
    /// Number of frames with a mask.
    pub num_frames: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(StcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => StcStatus::StcErrConfig,
            Error::Shape(_) => StcStatus::StcErrShape,
            Error::Format { .. } => StcStatus::StcErrFormat,
            Error::Io { .. } => StcStatus::StcErrIo,
            _ => StcStatus::StcErrRuntime,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(StcStatus::StcErrNullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(StcStatus::StcErrInvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> StcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StcStatus::StcOk,
        Ok(Err(Failure(status, msg))) => {
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
            StcStatus::StcErrPanic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn stc_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Creates a freshly initialized model. `embed_dim` 0 selects the default.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn stc_model_new(seed: u64, embed_dim: usize, out: *mut *mut StcModel) -> StcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let mut config = ModelConfig::default();
        if embed_dim > 0 {
            config.embed_dim = embed_dim;
        }
        let model = Model::new(&config, seed)?;
        *out = Box::into_raw(Box::new(StcModel { model: Arc::new(model) }));
        Ok(())
    })
}

/// Loads a checkpoint written by the `train` command or [`stc_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stc_model_load(path: *const c_char, out: *mut *mut StcModel) -> StcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(StcModel { model: Arc::new(model) }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn stc_model_save(model: *const StcModel, path: *const c_char) -> StcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        save_checkpoint(&model.model, &path_arg(path)?, None)?;
        Ok(())
    })
}

/// Length of each predicted dynamic mask kernel.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stc_model_kernel_length(model: *const StcModel, out: *mut usize) -> StcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out_ptr(out, "out")? = model.model.config().kernel_layout().param_count();
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stc_model_num_parameters(model: *const StcModel, out: *mut usize) -> StcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out_ptr(out, "out")? = model.model.num_parameters();
        Ok(())
    })
}

/// Releases a model. Trackers created from it stay valid. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stc_model_free(model: *mut StcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub extern "C" fn stc_tracker_default_params() -> StcTrackerParams {
    let d = DecodeParams::default();
    let a = AssocParams::default();
    StcTrackerParams {
        score_thresh: d.score_thresh,
        nms_thresh: d.nms_thresh,
        top_t: d.top_t,
        w_iou: a.w_iou,
        w_cls: a.w_cls,
        new_thresh: a.new_thresh,
    }
}

/// Starts tracking a new video. `params` may be null for defaults.
///
/// # Safety
/// `model` must come from this library, `params` null or valid, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stc_tracker_new(model: *const StcModel, params: *const StcTrackerParams, out: *mut *mut StcTracker) -> StcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out_ptr(out, "out")?;
        let p = params.as_ref().copied().unwrap_or_else(|| stc_tracker_default_params());
        let decode = DecodeParams {
            score_thresh: p.score_thresh,
            nms_thresh: p.nms_thresh,
            top_t: p.top_t,
            ..Default::default()
        };
        decode.validate()?;
        let assoc = AssocParams {
            w_iou: p.w_iou,
            w_cls: p.w_cls,
            new_thresh: p.new_thresh,
            ..Default::default()
        };
        assoc.validate()?;
        *out = Box::into_raw(Box::new(StcTracker {
            model: Arc::clone(&model.model),
            decode,
            tracker: VideoTracker::new(assoc),
            frame_size: None,
            tracks: Vec::new(),
        }));
        Ok(())
    })
}

/// Detects and associates one frame of interleaved 8-bit RGB
/// (`height * width * 3` bytes, row-major). Every frame of a video must
/// share one size, divisible by 32.
///
/// # Safety
/// `tracker` must come from this library; `rgb` must point to
/// `height * width * 3` readable bytes; `out_num_detections` null or writable.
#[no_mangle]
pub unsafe extern "C" fn stc_tracker_push_frame(
    tracker: *mut StcTracker,
    rgb: *const u8,
    height: usize,
    width: usize,
    out_num_detections: *mut usize,
) -> StcStatus {
    guard(|| {
        let t = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if height == 0 || width == 0 {
            return Err(invalid("frame size must be positive"));
        }
        if t.frame_size.is_some_and(|s| s != (height, width)) {
            return Err(invalid(format!("frame size {height}x{width} differs from the first frame")));
        }
        let n = height.checked_mul(width).and_then(|v| v.checked_mul(3)).ok_or_else(|| invalid("frame too large"))?;
        let bytes = std::slice::from_raw_parts(rgb, n);
        let mut data = vec![0f32; n];
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * height * width + i] = f32::from(px[c]) / 255.0;
            }
        }
        let frame = Frame { height, width, data };
        let model = &t.model;
        let out = model.forward_frames(&[&frame])?;
        let layout = model.config().kernel_layout();
        let dets = decode_detections(&out, &layout, model.config().normalizer_for(height, width), &t.decode)?;
        t.tracker.push(&dets);
        t.frame_size = Some((height, width));
        t.tracks = t.tracker.finish();
        if let Some(n) = out_num_detections.as_mut() {
            *n = dets.len();
        }
        Ok(())
    })
}

/// Number of frames pushed so far.
///
/// # Safety
/// `tracker` must come from this library; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stc_tracker_num_frames(tracker: *const StcTracker, out: *mut usize) -> StcStatus {
    guard(|| {
        let t = tracker.as_ref().ok_or_else(|| null("tracker"))?;
        *out_ptr(out, "out")? = t.tracker.frames_seen();
        Ok(())
    })
}

/// Number of tracks after majority voting over all frames pushed so far.
///
/// # Safety
/// `tracker` must come from this library; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stc_tracker_num_tracks(tracker: *const StcTracker, out: *mut usize) -> StcStatus {
    guard(|| {
        let t = tracker.as_ref().ok_or_else(|| null("tracker"))?;
        *out_ptr(out, "out")? = t.tracks.len();
        Ok(())
    })
}

/// # Safety
/// `tracker` must come from this library; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stc_tracker_track(tracker: *const StcTracker, index: usize, out: *mut StcTrack) -> StcStatus {
    guard(|| {
        let t = tracker.as_ref().ok_or_else(|| null("tracker"))?;
        let out = out_ptr(out, "out")?;
        let tr = t.tracks.get(index).ok_or_else(|| invalid(format!("track index {index} out of range ({})", t.tracks.len())))?;
        *out = StcTrack {
            track_id: tr.track_id,
            category: tr.category,
            score: tr.score,
            num_frames: tr.masks.iter().filter(|m| m.is_some()).count(),
        };
        Ok(())
    })
}

/// Copies the track's binary mask (0/1 bytes, row-major) at `frame` into
/// `buf`. Sets `*out_present` to false and leaves `buf` untouched when the
/// track has no mask there.
///
/// # Safety
/// `tracker` must come from this library; `buf` must hold `buf_len` writable
/// bytes; `out_present` writable.
#[no_mangle]
pub unsafe extern "C" fn stc_tracker_track_mask(
    tracker: *const StcTracker,
    index: usize,
    frame: usize,
    buf: *mut u8,
    buf_len: usize,
    out_present: *mut bool,
) -> StcStatus {
    guard(|| {
        let t = tracker.as_ref().ok_or_else(|| null("tracker"))?;
        let present = out_ptr(out_present, "out_present")?;
        let tr = t.tracks.get(index).ok_or_else(|| invalid(format!("track index {index} out of range ({})", t.tracks.len())))?;
        let slot = tr.masks.get(frame).ok_or_else(|| invalid(format!("frame {frame} out of range ({})", tr.masks.len())))?;
        let Some(mask) = slot else {
            *present = false;
            return Ok(());
        };
        let src = mask.as_slice();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if buf_len < src.len() {
            return Err(invalid(format!("buffer holds {buf_len} bytes, mask needs {}", src.len())));
        }
        std::slice::from_raw_parts_mut(buf, src.len()).copy_from_slice(src);
        *present = true;
        Ok(())
    })
}

/// # Safety
/// `tracker` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stc_tracker_free(tracker: *mut StcTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}
