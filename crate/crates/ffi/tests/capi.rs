//! Exercises the C ABI end to end: load a checkpoint, predict from raw
//! buffers, score a directory pair, and check the error paths.

use std::ffi::CString;

use gl_dmnet::config::RunConfig;
use gl_dmnet::model::GlDmNet;
use gl_dmnet::train::{checkpoint_data, Adam};

use gl_dmnet_ffi::{
    gldm_eval_dataset, gldm_last_error, gldm_model_free, gldm_model_input_size, gldm_model_load,
    gldm_model_predict, gldm_version, GldmMetrics, GldmModel, GldmStatus,
};

fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.data_image_size = 32;
    cfg.train_seed = 5;
    let model = GlDmNet::new(&cfg, &candle_core::Device::Cpu, candle_core::DType::F32).unwrap();
    let adam = Adam::new(model.store().trainables()).unwrap();
    let data = checkpoint_data(&model, &adam, &cfg, 0, 0).unwrap();
    let path = dir.join("tiny.ckpt");
    gl_dmnet::checkpoint::save_checkpoint(&path, &data).unwrap();
    path
}

fn last_error() -> String {
    let mut buf = vec![0i8; 512];
    let n = unsafe { gldm_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(511)].iter().map(|&c| c as u8).collect();
    String::from_utf8_lossy(&bytes).to_string()
}

#[test]
fn version_is_nonempty() {
    let v = unsafe { std::ffi::CStr::from_ptr(gldm_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn load_predict_free_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let c_path = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut handle: *mut GldmModel = std::ptr::null_mut();
    let status = unsafe { gldm_model_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, GldmStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    assert_eq!(unsafe { gldm_model_input_size(handle) }, 32);

    let (h, w) = (40usize, 48usize);
    let rgb: Vec<u8> = (0..h * w * 3).map(|i| (i % 251) as u8).collect();
    let depth: Vec<u8> = (0..h * w).map(|i| (i % 211) as u8).collect();
    let mut out1 = vec![0u8; h * w];
    let mut out2 = vec![0u8; h * w];
    for out in [&mut out1, &mut out2] {
        let status = unsafe {
            gldm_model_predict(
                handle,
                rgb.as_ptr(),
                depth.as_ptr(),
                h as u32,
                w as u32,
                out.as_mut_ptr(),
            )
        };
        assert_eq!(status, GldmStatus::Ok, "{}", last_error());
    }
    assert_eq!(out1, out2, "prediction must be deterministic");
    unsafe { gldm_model_free(handle) };
}

#[test]
fn load_missing_file_reports_checkpoint_error() {
    let c_path = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut handle: *mut GldmModel = std::ptr::null_mut();
    let status = unsafe { gldm_model_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, GldmStatus::CheckpointError);
    assert!(handle.is_null());
    assert!(last_error().contains("cannot open"));
}

#[test]
fn null_arguments_rejected() {
    let mut handle: *mut GldmModel = std::ptr::null_mut();
    let status = unsafe { gldm_model_load(std::ptr::null(), &mut handle) };
    assert_eq!(status, GldmStatus::InvalidArgument);
}

#[test]
fn eval_dataset_perfect_maps() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let gt = dir.path().join("gt");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    for i in 0..2 {
        let img = image::GrayImage::from_fn(16, 16, |x, y| {
            image::Luma([if (x + y + i) % 2 == 0 { 255u8 } else { 0u8 }])
        });
        img.save(pred.join(format!("s{i}.png"))).unwrap();
        img.save(gt.join(format!("s{i}.png"))).unwrap();
    }
    let c_pred = CString::new(pred.to_str().unwrap()).unwrap();
    let c_gt = CString::new(gt.to_str().unwrap()).unwrap();
    let mut metrics = GldmMetrics {
        mae: -1.0,
        s_measure: 0.0,
        e_measure_max: 0.0,
        e_measure_mean: 0.0,
        f_max: 0.0,
        n_images: 0,
        n_excluded_empty_gt: 0,
    };
    let status = unsafe { gldm_eval_dataset(c_pred.as_ptr(), c_gt.as_ptr(), &mut metrics) };
    assert_eq!(status, GldmStatus::Ok, "{}", last_error());
    assert_eq!(metrics.n_images, 2);
    assert!(metrics.mae.abs() < 1e-9);
    assert!((metrics.f_max - 1.0).abs() < 1e-9);
    assert!((metrics.s_measure - 1.0).abs() < 1e-6);
    assert!((metrics.e_measure_max - 1.0).abs() < 1e-6);
}

#[test]
fn eval_empty_dir_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let gt = dir.path().join("gt");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    let c_pred = CString::new(pred.to_str().unwrap()).unwrap();
    let c_gt = CString::new(gt.to_str().unwrap()).unwrap();
    let mut metrics = GldmMetrics {
        mae: 0.0,
        s_measure: 0.0,
        e_measure_max: 0.0,
        e_measure_mean: 0.0,
        f_max: 0.0,
        n_images: 0,
        n_excluded_empty_gt: 0,
    };
    let status = unsafe { gldm_eval_dataset(c_pred.as_ptr(), c_gt.as_ptr(), &mut metrics) };
    assert_eq!(status, GldmStatus::DataError);
}

#[test]
fn header_was_generated() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/gl_dmnet.h");
    let text = std::fs::read_to_string(header).unwrap();
    assert!(text.contains("gldm_model_predict"));
    assert!(text.contains("GldmStatus"));
}
