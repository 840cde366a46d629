//! C ABI for loading, building, quantizing and running thermoyolo models.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every function returns a [`TyStatus`]; on
//! failure [`ty_last_error_message`] describes the most recent error on the
//! calling thread.

#![allow(clippy::too_many_arguments)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use thermoyolo::anchors::AnchorSet;
use thermoyolo::detector::Detector;
use thermoyolo::imaging::Frame;
use thermoyolo::netgraph::{build_yolov5n, load_model, save_model, ModelGraph};
use thermoyolo::postprocess::PostprocessConfig;
use thermoyolo::quantize::{calibrate, load_quantized, quantize_model, save_quantized, CalibMode, QuantizedModel};
use thermoyolo::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TyStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Data = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// One detection in source-frame pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TyDetection {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub class_id: u32,
    pub score: f32,
}

/// Float model.
pub struct TyModel {
    graph: ModelGraph,
    detector: Detector,
}

/// Int8 model.
pub struct TyQModel {
    model: QuantizedModel,
    detector: Detector,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> TyStatus {
    match e {
        Error::Io { .. } => TyStatus::Io,
        Error::InvalidArgument(_) => TyStatus::InvalidArgument,
        e if e.is_format_error() => TyStatus::Format,
        _ => TyStatus::Data,
    }
}

struct Failure(TyStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TyStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TyStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TyStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TyStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TyStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn frame_arg(pixels: *const u8, width: u32, height: u32) -> Result<Frame, Failure> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let (w, h) = (width as usize, height as usize);
    let data = std::slice::from_raw_parts(pixels, w * h).to_vec();
    Ok(Frame::new(w, h, data, "ffi")?)
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn float_handle(graph: ModelGraph) -> Result<TyModel, Failure> {
    let detector = Detector::from_graph(&graph)?;
    Ok(TyModel { graph, detector })
}

unsafe fn run_detect(
    detector: &Detector,
    pixels: *const u8,
    width: u32,
    height: u32,
    conf: f32,
    iou: f32,
    out: *mut TyDetection,
    capacity: usize,
    count: *mut usize,
) -> Result<(), Failure> {
    if count.is_null() {
        return Err(null("count"));
    }
    if out.is_null() && capacity > 0 {
        return Err(null("out"));
    }
    let frame = frame_arg(pixels, width, height)?;
    let cfg = PostprocessConfig { conf_threshold: conf, iou_threshold: iou, ..PostprocessConfig::default() };
    let dets = detector.detect(&frame, &cfg)?.detections;
    *count = dets.len();
    for (i, d) in dets.iter().take(capacity).enumerate() {
        *out.add(i) = TyDetection {
            x1: d.x1,
            y1: d.y1,
            x2: d.x2,
            y2: d.y2,
            class_id: d.class_id as u32,
            score: d.score,
        };
    }
    if dets.len() > capacity {
        return Err(Failure(
            TyStatus::BufferTooSmall,
            format!("{} detections, capacity {capacity}", dets.len()),
        ));
    }
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ty_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn ty_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Randomly initialised nano model.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn ty_model_build_nano(
    num_classes: u32,
    input_size: u32,
    seed: u64,
    out: *mut *mut TyModel,
) -> TyStatus {
    guard(|| {
        let mut g = build_yolov5n(num_classes as usize, input_size as usize, AnchorSet::default())?;
        g.randomize(seed);
        put(out, float_handle(g)?)
    })
}

/// Loads a TYM1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as for [`ty_model_build_nano`].
#[no_mangle]
pub unsafe extern "C" fn ty_model_load(path: *const c_char, out: *mut *mut TyModel) -> TyStatus {
    guard(|| {
        let g = load_model(path_arg(path)?)?;
        put(out, float_handle(g)?)
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ty_model_save(model: *const TyModel, path: *const c_char) -> TyStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        Ok(save_model(&m.graph, path_arg(path)?)?)
    })
}

/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ty_model_input_size(model: *const TyModel) -> u32 {
    model.as_ref().map_or(0, |m| m.graph.input_size as u32)
}

/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ty_model_num_classes(model: *const TyModel) -> u32 {
    model.as_ref().map_or(0, |m| m.graph.num_classes as u32)
}

/// Detects on an 8-bit grayscale frame of `width · height` bytes. `*count`
/// receives the total number of detections; at most `capacity` are
/// written, and a larger total returns `BufferTooSmall`.
///
/// # Safety
/// `pixels` must hold `width · height` bytes and `out` room for `capacity`
/// records.
#[no_mangle]
pub unsafe extern "C" fn ty_model_detect(
    model: *const TyModel,
    pixels: *const u8,
    width: u32,
    height: u32,
    conf_threshold: f32,
    iou_threshold: f32,
    out: *mut TyDetection,
    capacity: usize,
    count: *mut usize,
) -> TyStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        run_detect(&m.detector, pixels, width, height, conf_threshold, iou_threshold, out, capacity, count)
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ty_model_free(model: *mut TyModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Calibrates on `count` frames stored back to back (each `width · height`
/// bytes) with min/max ranges and returns the int8 model.
///
/// # Safety
/// `frames` must hold `count · width · height` bytes; `out` as for
/// [`ty_model_build_nano`].
#[no_mangle]
pub unsafe extern "C" fn ty_model_quantize(
    model: *const TyModel,
    frames: *const u8,
    width: u32,
    height: u32,
    count: u32,
    out: *mut *mut TyQModel,
) -> TyStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if frames.is_null() {
            return Err(null("frames"));
        }
        let plane = width as usize * height as usize;
        let calib = (0..count as usize)
            .map(|i| frame_arg(frames.add(i * plane), width, height))
            .collect::<Result<Vec<_>, _>>()?;
        let stats = calibrate(&m.graph, &calib, CalibMode::MinMax)?;
        let q = quantize_model(&m.graph, &stats)?;
        put(out, TyQModel { detector: Detector::Quantized(q.clone()), model: q })
    })
}

/// Loads a TYQ1 file.
///
/// # Safety
/// As for [`ty_model_load`].
#[no_mangle]
pub unsafe extern "C" fn ty_qmodel_load(path: *const c_char, out: *mut *mut TyQModel) -> TyStatus {
    guard(|| {
        let q = load_quantized(path_arg(path)?)?;
        put(out, TyQModel { detector: Detector::Quantized(q.clone()), model: q })
    })
}

/// # Safety
/// As for [`ty_model_save`].
#[no_mangle]
pub unsafe extern "C" fn ty_qmodel_save(model: *const TyQModel, path: *const c_char) -> TyStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        Ok(save_quantized(&m.model, path_arg(path)?)?)
    })
}

/// Int8 counterpart of [`ty_model_detect`].
///
/// # Safety
/// As for [`ty_model_detect`].
#[no_mangle]
pub unsafe extern "C" fn ty_qmodel_detect(
    model: *const TyQModel,
    pixels: *const u8,
    width: u32,
    height: u32,
    conf_threshold: f32,
    iou_threshold: f32,
    out: *mut TyDetection,
    capacity: usize,
    count: *mut usize,
) -> TyStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        run_detect(&m.detector, pixels, width, height, conf_threshold, iou_threshold, out, capacity, count)
    })
}

/// # Safety
/// As for [`ty_model_free`].
#[no_mangle]
pub unsafe extern "C" fn ty_qmodel_free(model: *mut TyQModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
