//! C ABI: opaque model handles, status codes, and a thread-local last-error
//! message. The generated header lands in `include/gl_dmnet.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gl_dmnet::config::RunConfig;
use gl_dmnet::data::{prepare_pair_from_buffers, ImageBuf};
use gl_dmnet::error::Error;
use gl_dmnet::metrics::evaluate_dataset;
use gl_dmnet::model::GlDmNet;
use gl_dmnet::train::model_from_checkpoint;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GldmStatus {
    Ok = 0,
    InvalidArgument = 1,
    IoError = 2,
    DataError = 3,
    CheckpointError = 4,
    ShapeError = 5,
    InternalError = 6,
}

/// Aggregate evaluation scores for a prediction directory.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct GldmMetrics {
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure_max: f64,
    pub e_measure_mean: f64,
    pub f_max: f64,
    pub n_images: u32,
    pub n_excluded_empty_gt: u32,
}

/// Opaque model handle.
pub struct GldmModel {
    model: GlDmNet,
    config: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> GldmStatus {
    match err.class() {
        "config" => GldmStatus::InvalidArgument,
        "io" => GldmStatus::IoError,
        "data" | "image" => GldmStatus::DataError,
        "checkpoint" => GldmStatus::CheckpointError,
        "shape" => GldmStatus::ShapeError,
        _ => GldmStatus::InternalError,
    }
}

fn fail(err: Error) -> GldmStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn guard<F: FnOnce() -> GldmStatus>(f: F) -> GldmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            GldmStatus::InternalError
        }
    }
}

unsafe fn cstr_to_path<'a>(p: *const c_char) -> Result<&'a Path, GldmStatus> {
    if p.is_null() {
        set_error("null path");
        return Err(GldmStatus::InvalidArgument);
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid utf-8");
            Err(GldmStatus::InvalidArgument)
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gldm_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Copies the last error message (NUL-terminated, truncated to `cap`).
/// Returns the full message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point to `cap` writable bytes (or be null to query length).
#[no_mangle]
pub unsafe extern "C" fn gldm_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a model from a checkpoint file into a fresh handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gldm_model_load(
    path: *const c_char,
    out: *mut *mut GldmModel,
) -> GldmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output handle");
            return GldmStatus::InvalidArgument;
        }
        let path = match cstr_to_path(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match model_from_checkpoint(path) {
            Ok((model, config)) => {
                let handle = Box::new(GldmModel { model, config });
                *out = Box::into_raw(handle);
                GldmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a handle obtained from `gldm_model_load`.
///
/// # Safety
/// `model` must be a pointer returned by `gldm_model_load`, used once.
#[no_mangle]
pub unsafe extern "C" fn gldm_model_free(model: *mut GldmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Network input side length (images are resized internally).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gldm_model_input_size(model: *const GldmModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).config.data_image_size as u32
}

/// Predicts a saliency map for one RGB + depth pair.
///
/// `rgb` is interleaved 8-bit RGB (h*w*3 bytes, row-major), `depth` an
/// 8-bit single-channel plane (h*w bytes). The result is written to
/// `out_map` as h*w bytes, round(255 * S) at the input resolution.
///
/// # Safety
/// All buffers must match the documented sizes; `model` must be live.
#[no_mangle]
pub unsafe extern "C" fn gldm_model_predict(
    model: *const GldmModel,
    rgb: *const u8,
    depth: *const u8,
    h: u32,
    w: u32,
    out_map: *mut u8,
) -> GldmStatus {
    guard(|| {
        if model.is_null() || rgb.is_null() || depth.is_null() || out_map.is_null() {
            set_error("null argument");
            return GldmStatus::InvalidArgument;
        }
        if h == 0 || w == 0 {
            set_error("empty image");
            return GldmStatus::InvalidArgument;
        }
        let (h, w) = (h as usize, w as usize);
        let handle = &*model;
        let rgb_slice = std::slice::from_raw_parts(rgb, h * w * 3);
        let depth_slice = std::slice::from_raw_parts(depth, h * w);
        let result = (|| -> gl_dmnet::Result<Vec<u8>> {
            let size = handle.config.data_image_size;
            let (rgb_buf, depth_buf) = prepare_pair_from_buffers(rgb_slice, depth_slice, h, w, size)?;
            let device = candle_core::Device::Cpu;
            let s1 = handle
                .model
                .predict(&rgb_buf.to_tensor(&device)?, &depth_buf.to_tensor(&device)?)?;
            let (_, _, sh, sw) = s1.dims4()?;
            let values = s1.flatten_all()?.to_vec1::<f32>()?;
            let map = ImageBuf::new(1, sh, sw, values)?.resize_bilinear(h, w);
            Ok(map
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect())
        })();
        match result {
            Ok(bytes) => {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), out_map, h * w);
                GldmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Scores a directory of predicted maps against same-stem ground truth.
///
/// # Safety
/// `pred_dir` / `gt_dir` must be valid NUL-terminated strings and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gldm_eval_dataset(
    pred_dir: *const c_char,
    gt_dir: *const c_char,
    out: *mut GldmMetrics,
) -> GldmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return GldmStatus::InvalidArgument;
        }
        let pred = match cstr_to_path(pred_dir) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let gt = match cstr_to_path(gt_dir) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match evaluate_dataset(pred, gt) {
            Ok(report) => {
                *out = GldmMetrics {
                    mae: report.mae,
                    s_measure: report.s_measure,
                    e_measure_max: report.e_measure_max,
                    e_measure_mean: report.e_measure_mean,
                    f_max: report.f_max,
                    n_images: report.n_images as u32,
                    n_excluded_empty_gt: report.n_excluded_empty_gt as u32,
                };
                GldmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
