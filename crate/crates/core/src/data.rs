//! Dataset ingestion, preprocessing and augmentation for paired
//! RGB / depth / ground-truth corpora.
//!
//! Layout: `<root>/<dataset>/{RGB,depth,GT}/<stem>.<ext>` with extensions
//! jpg/png/bmp. Loading resizes everything to the configured square size
//! (bilinear for RGB and depth, nearest + 0.5 threshold for masks), min-max
//! normalizes depth per image and replicates it to three channels, and
//! standardizes both RGB and replicated depth with the same fixed
//! per-channel statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RGB_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Training-set sizes of the standard corpora; checked (warning only) when
/// those dataset names are present in a train manifest.
const EXPECTED_TRAIN_COUNTS: [(&str, usize); 3] = [("NLPR", 700), ("DUT-RGBD", 800), ("NJUD", 1485)];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    pub gt_path: PathBuf,
    pub dataset_name: String,
    pub stem: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub warnings: Vec<String>,
}

const DATA_EXTS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

fn files_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if let Some(ext) = ext {
            if DATA_EXTS.contains(&ext.as_str()) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.insert(stem.to_string(), path.clone());
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic, stem-sorted manifest over every dataset directory under
/// `root`. Orphan files (a stem missing one of its three counterparts) are
/// an error naming the offending paths.
pub fn build_manifest(root: &Path, split: Split) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut datasets: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    datasets.sort();
    if datasets.is_empty() {
        return Err(Error::Data(format!("no dataset directories under {}", root.display())));
    }
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for ds in &datasets {
        let name = ds.file_name().and_then(|s| s.to_str()).unwrap_or("?").to_string();
        let rgb_dir = ds.join("RGB");
        let depth_dir = ds.join("depth");
        let gt_dir = ds.join("GT");
        for d in [&rgb_dir, &depth_dir, &gt_dir] {
            if !d.is_dir() {
                return Err(Error::Data(format!("missing directory {}", d.display())));
            }
        }
        let rgb = files_by_stem(&rgb_dir)?;
        let depth = files_by_stem(&depth_dir)?;
        let gt = files_by_stem(&gt_dir)?;
        let mut orphans = Vec::new();
        let mut count = 0usize;
        for (stem, rgb_path) in &rgb {
            match (depth.get(stem), gt.get(stem)) {
                (Some(dp), Some(gp)) => {
                    records.push(SampleRecord {
                        rgb_path: rgb_path.clone(),
                        depth_path: dp.clone(),
                        gt_path: gp.clone(),
                        dataset_name: name.clone(),
                        stem: stem.clone(),
                    });
                    count += 1;
                }
                _ => orphans.push(rgb_path.display().to_string()),
            }
        }
        for (stem, p) in depth.iter().chain(gt.iter()) {
            if !rgb.contains_key(stem) {
                orphans.push(p.display().to_string());
            }
        }
        if !orphans.is_empty() {
            return Err(Error::Data(format!(
                "orphan files in {}: {}",
                ds.display(),
                orphans.join(", ")
            )));
        }
        if split == Split::Train {
            for (expected_name, expected_count) in EXPECTED_TRAIN_COUNTS {
                if name == expected_name && count != expected_count {
                    warnings.push(format!(
                        "dataset {name}: {count} training samples, the standard split has {expected_count}"
                    ));
                }
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no samples found under {}", root.display())));
    }
    Ok(Manifest { records, warnings })
}

/// Line-delimited JSON export of the manifest records.
pub fn export_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    for rec in &manifest.records {
        out.push_str(&serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// CHW f32 image buffer used by the loading/augmentation pipeline.
#[derive(Debug, Clone)]
pub struct ImageBuf {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "image buffer {}x{}x{} needs {} values, got {}",
                c,
                h,
                w,
                c * h * w,
                data.len()
            )));
        }
        Ok(ImageBuf { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        ImageBuf { c, h, w, data: vec![0.0; c * h * w] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn load_rgb(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let raw = img.into_raw();
        let (w, h) = (w as usize, h as usize);
        let mut data = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    data[(ch * h + y) * w + x] = raw[(y * w + x) * 3 + ch] as f32 / 255.0;
                }
            }
        }
        ImageBuf::new(3, h, w, data)
    }

    pub fn load_gray(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        ImageBuf::new(1, h as usize, w as usize, data)
    }

    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Self {
        if (oh, ow) == (self.h, self.w) {
            return self.clone();
        }
        let mut out = ImageBuf::zeros(self.c, oh, ow);
        let sy = self.h as f32 / oh as f32;
        let sx = self.w as f32 / ow as f32;
        for ch in 0..self.c {
            for oy in 0..oh {
                let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f32);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.h - 1);
                let wy = fy - y0 as f32;
                for ox in 0..ow {
                    let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f32);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.w - 1);
                    let wx = fx - x0 as f32;
                    let top = self.at(ch, y0, x0) * (1.0 - wx) + self.at(ch, y0, x1) * wx;
                    let bot = self.at(ch, y1, x0) * (1.0 - wx) + self.at(ch, y1, x1) * wx;
                    out.set(ch, oy, ox, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Self {
        if (oh, ow) == (self.h, self.w) {
            return self.clone();
        }
        let mut out = ImageBuf::zeros(self.c, oh, ow);
        let sy = self.h as f32 / oh as f32;
        let sx = self.w as f32 / ow as f32;
        for ch in 0..self.c {
            for oy in 0..oh {
                let y = (((oy as f32 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(self.h - 1);
                for ox in 0..ow {
                    let x = (((ox as f32 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(self.w - 1);
                    out.set(ch, oy, ox, self.at(ch, y, x));
                }
            }
        }
        out
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for ch in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(ch, y, x, self.at(ch, y, self.w - 1 - x));
                }
            }
        }
        out
    }

    /// Rotate around the image center by `degrees`, sampling the source with
    /// bilinear or nearest lookup; out-of-frame pixels are 0.
    pub fn rotate(&self, degrees: f32, nearest: bool) -> Self {
        let rad = degrees.to_radians();
        let (sin, cos) = rad.sin_cos();
        let cy = (self.h as f32 - 1.0) / 2.0;
        let cx = (self.w as f32 - 1.0) / 2.0;
        let mut out = ImageBuf::zeros(self.c, self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                let sy = cy + dy * cos - dx * sin;
                let sx = cx + dy * sin + dx * cos;
                if sy < 0.0 || sx < 0.0 || sy > (self.h - 1) as f32 || sx > (self.w - 1) as f32 {
                    continue;
                }
                for ch in 0..self.c {
                    let v = if nearest {
                        self.at(ch, sy.round() as usize, sx.round() as usize)
                    } else {
                        let y0 = sy.floor() as usize;
                        let x0 = sx.floor() as usize;
                        let y1 = (y0 + 1).min(self.h - 1);
                        let x1 = (x0 + 1).min(self.w - 1);
                        let wy = sy - y0 as f32;
                        let wx = sx - x0 as f32;
                        let top = self.at(ch, y0, x0) * (1.0 - wx) + self.at(ch, y0, x1) * wx;
                        let bot = self.at(ch, y1, x0) * (1.0 - wx) + self.at(ch, y1, x1) * wx;
                        top * (1.0 - wy) + bot * wy
                    };
                    out.set(ch, y, x, v);
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, ch_: usize, cw: usize) -> Self {
        let mut out = ImageBuf::zeros(self.c, ch_, cw);
        for c in 0..self.c {
            for y in 0..ch_ {
                for x in 0..cw {
                    out.set(c, y, x, self.at(c, top + y, left + x));
                }
            }
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, self.c, self.h, self.w), device)?)
    }
}

/// Raw (resized, unnormalized) sample triple in [0, 1].
pub struct RawSample {
    pub rgb: ImageBuf,
    pub depth: ImageBuf,
    pub gt: ImageBuf,
}

/// Load and resize one record: bilinear for RGB and the single-channel
/// depth, nearest + 0.5-threshold binarization for the mask.
pub fn load_raw(record: &SampleRecord, size: usize) -> Result<RawSample> {
    let rgb = ImageBuf::load_rgb(&record.rgb_path)?.resize_bilinear(size, size);
    let depth = ImageBuf::load_gray(&record.depth_path)?.resize_bilinear(size, size);
    let gt_src = ImageBuf::load_gray(&record.gt_path)?.resize_nearest(size, size);
    let gt = ImageBuf {
        c: 1,
        h: gt_src.h,
        w: gt_src.w,
        data: gt_src.data.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect(),
    };
    Ok(RawSample { rgb, depth, gt })
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub rotation_degrees: f64,
    pub crop_scale_min: f64,
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip_prob: 0.5,
            rotation_degrees: 15.0,
            crop_scale_min: 0.9,
            jitter: 0.1,
        }
    }
}

/// One consistent geometric transform for RGB/depth/GT (crop, flip,
/// rotation) plus photometric jitter on RGB only. Deterministic under the
/// supplied rng.
pub fn augment(sample: &mut RawSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    if !cfg.enabled {
        return;
    }
    let (h, w) = (sample.rgb.h, sample.rgb.w);
    // crop
    let scale = cfg.crop_scale_min + rng.gen::<f64>() * (1.0 - cfg.crop_scale_min);
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let top = rng.gen_range(0..=(h - ch));
    let left = rng.gen_range(0..=(w - cw));
    if (ch, cw) != (h, w) {
        sample.rgb = sample.rgb.crop(top, left, ch, cw).resize_bilinear(h, w);
        sample.depth = sample.depth.crop(top, left, ch, cw).resize_bilinear(h, w);
        sample.gt = sample.gt.crop(top, left, ch, cw).resize_nearest(h, w);
    }
    // flip
    if rng.gen::<f64>() < cfg.flip_prob {
        sample.rgb = sample.rgb.hflip();
        sample.depth = sample.depth.hflip();
        sample.gt = sample.gt.hflip();
    }
    // rotation
    let angle = (rng.gen::<f64>() * 2.0 - 1.0) * cfg.rotation_degrees;
    if angle.abs() > 1e-9 {
        sample.rgb = sample.rgb.rotate(angle as f32, false);
        sample.depth = sample.depth.rotate(angle as f32, false);
        sample.gt = sample.gt.rotate(angle as f32, true);
    }
    // photometric jitter, RGB only
    let j = cfg.jitter;
    if j <= 0.0 {
        return;
    }
    let brightness = 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * j;
    let contrast = 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * j;
    let saturation = 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * j;
    let hw = sample.rgb.h * sample.rgb.w;
    let mean: f32 = sample.rgb.data.iter().sum::<f32>() / sample.rgb.data.len() as f32;
    for i in 0..hw {
        let r = sample.rgb.data[i];
        let g = sample.rgb.data[hw + i];
        let b = sample.rgb.data[2 * hw + i];
        let gray = 0.299 * r + 0.587 * g + 0.114 * b;
        for (ch, v) in [(0usize, r), (1, g), (2, b)] {
            let mut x = gray + (v - gray) * saturation as f32;
            x = mean + (x - mean) * contrast as f32;
            x *= brightness as f32;
            sample.rgb.data[ch * hw + i] = x;
        }
    }
    sample.rgb.clamp01();
}

/// Standardize RGB (and replicated depth) with the fixed statistics.
fn standardize(buf: &ImageBuf) -> ImageBuf {
    let mut out = buf.clone();
    let hw = buf.h * buf.w;
    for ch in 0..buf.c {
        let m = RGB_MEAN[ch % 3];
        let s = RGB_STD[ch % 3];
        for i in 0..hw {
            out.data[ch * hw + i] = (buf.data[ch * hw + i] - m) / s;
        }
    }
    out
}

/// Min-max normalize depth to [0, 1] (constant maps become all zeros) and
/// replicate to three channels.
fn replicate_depth(depth: &ImageBuf) -> ImageBuf {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in &depth.data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let norm: Vec<f32> = if range <= 1e-12 {
        vec![0.0; depth.data.len()]
    } else {
        depth.data.iter().map(|&v| (v - lo) / range).collect()
    };
    let mut data = Vec::with_capacity(3 * norm.len());
    for _ in 0..3 {
        data.extend_from_slice(&norm);
    }
    ImageBuf { c: 3, h: depth.h, w: depth.w, data }
}

/// Final model-ready tensors for one raw sample.
pub struct PreparedSample {
    pub rgb: ImageBuf,   // 3 channels, standardized
    pub depth: ImageBuf, // 3 channels, standardized replica
    pub gt: ImageBuf,    // 1 channel, binary
}

pub fn prepare(sample: &RawSample) -> PreparedSample {
    PreparedSample {
        rgb: standardize(&sample.rgb),
        depth: standardize(&replicate_depth(&sample.depth)),
        gt: sample.gt.clone(),
    }
}

/// preprocess: load + resize + normalize one record (no augmentation).
pub fn preprocess(record: &SampleRecord, size: usize) -> Result<PreparedSample> {
    Ok(prepare(&load_raw(record, size)?))
}

/// Model-ready buffers from raw interleaved RGB8 and gray8 planes (the
/// foreign-function predict path).
pub fn prepare_pair_from_buffers(
    rgb: &[u8],
    depth: &[u8],
    h: usize,
    w: usize,
    size: usize,
) -> Result<(ImageBuf, ImageBuf)> {
    if rgb.len() != h * w * 3 || depth.len() != h * w {
        return Err(Error::Shape(format!(
            "buffer sizes {} / {} do not match {}x{} rgb8 / gray8 planes",
            rgb.len(),
            depth.len(),
            h,
            w
        )));
    }
    let mut rgb_data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                rgb_data[(ch * h + y) * w + x] = rgb[(y * w + x) * 3 + ch] as f32 / 255.0;
            }
        }
    }
    let rgb_buf = ImageBuf::new(3, h, w, rgb_data)?.resize_bilinear(size, size);
    let depth_buf = ImageBuf::new(1, h, w, depth.iter().map(|&v| v as f32 / 255.0).collect())?
        .resize_bilinear(size, size);
    Ok((
        standardize(&rgb_buf),
        standardize(&replicate_depth(&depth_buf)),
    ))
}

/// Model-ready RGB + replicated-depth buffers for a bare image pair (the
/// predict path, no ground truth), plus the original resolution.
pub fn prepare_pair(
    rgb_path: &Path,
    depth_path: &Path,
    size: usize,
) -> Result<(ImageBuf, ImageBuf, (usize, usize))> {
    let rgb_src = ImageBuf::load_rgb(rgb_path)?;
    let orig = (rgb_src.h, rgb_src.w);
    let rgb = standardize(&rgb_src.resize_bilinear(size, size));
    let depth_src = ImageBuf::load_gray(depth_path)?.resize_bilinear(size, size);
    let depth = standardize(&replicate_depth(&depth_src));
    Ok((rgb, depth, orig))
}

/// Per-sample augmentation stream: derived from (seed, epoch, index) so
/// parallel loading cannot reorder draws.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut mix = seed ^ 0xA076_1D64_78BD_642F;
    for v in [epoch as u64, index as u64] {
        mix ^= v.wrapping_mul(0xE703_7ED1_A0B4_28DB);
        mix = mix.rotate_left(23).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
    ChaCha8Rng::seed_from_u64(mix)
}

/// Batch tensors on the device: (b,3,s,s), (b,3,s,s), (b,1,s,s).
pub struct Batch {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub gt: Tensor,
    pub stems: Vec<String>,
}

pub fn make_batch(samples: &[PreparedSample], stems: Vec<String>, device: &Device) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let cat = |get: fn(&PreparedSample) -> &ImageBuf| -> Result<Tensor> {
        let parts: Vec<Tensor> = samples
            .iter()
            .map(|s| get(s).to_tensor(device))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::cat(&refs, 0)?)
    };
    Ok(Batch {
        rgb: cat(|s| &s.rgb)?.to_dtype(DType::F32)?,
        depth: cat(|s| &s.depth)?.to_dtype(DType::F32)?,
        gt: cat(|s| &s.gt)?.to_dtype(DType::F32)?,
        stems,
    })
}

/// Epoch-level shuffled index order, a pure function of (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15));
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_gradient(c: usize, h: usize, w: usize) -> ImageBuf {
        let data = (0..c * h * w).map(|i| (i % 97) as f32 / 96.0).collect();
        ImageBuf::new(c, h, w, data).unwrap()
    }

    #[test]
    fn hflip_roundtrip() {
        let img = toy_gradient(3, 6, 8);
        let back = img.hflip().hflip();
        assert_eq!(img.data, back.data);
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let mk = || RawSample {
            rgb: toy_gradient(3, 16, 16),
            depth: toy_gradient(1, 16, 16),
            gt: ImageBuf::new(1, 16, 16, (0..256).map(|i| (i % 2) as f32).collect()).unwrap(),
        };
        let cfg = AugmentConfig::default();
        let mut a = mk();
        let mut b = mk();
        augment(&mut a, &cfg, &mut sample_rng(7, 3, 5));
        augment(&mut b, &cfg, &mut sample_rng(7, 3, 5));
        assert_eq!(a.rgb.data, b.rgb.data);
        assert_eq!(a.gt.data, b.gt.data);
        let mut c = mk();
        augment(&mut c, &cfg, &mut sample_rng(8, 3, 5));
        assert_ne!(a.rgb.data, c.rgb.data);
    }

    #[test]
    fn augment_disabled_is_identity() {
        let mut s = RawSample {
            rgb: toy_gradient(3, 8, 8),
            depth: toy_gradient(1, 8, 8),
            gt: ImageBuf::new(1, 8, 8, vec![0.0; 64]).unwrap(),
        };
        let before = s.rgb.data.clone();
        let cfg = AugmentConfig { enabled: false, ..Default::default() };
        augment(&mut s, &cfg, &mut sample_rng(1, 0, 0));
        assert_eq!(before, s.rgb.data);
    }

    #[test]
    fn gt_stays_binary_through_augmentation() {
        let mut s = RawSample {
            rgb: toy_gradient(3, 32, 32),
            depth: toy_gradient(1, 32, 32),
            gt: ImageBuf::new(1, 32, 32, (0..1024).map(|i| ((i / 7) % 2) as f32).collect()).unwrap(),
        };
        augment(&mut s, &AugmentConfig::default(), &mut sample_rng(3, 1, 2));
        assert!(s.gt.data.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn geometric_consistency_flip_only() {
        // With rotation/crop/jitter off and flip forced, all three planes
        // must receive the same flip.
        let mut s = RawSample {
            rgb: toy_gradient(3, 8, 8),
            depth: toy_gradient(1, 8, 8),
            gt: ImageBuf::new(1, 8, 8, (0..64).map(|i| (i % 2) as f32).collect()).unwrap(),
        };
        let rgb0 = s.rgb.clone();
        let gt0 = s.gt.clone();
        let cfg = AugmentConfig {
            enabled: true,
            flip_prob: 1.0,
            rotation_degrees: 0.0,
            crop_scale_min: 1.0,
            jitter: 0.0,
        };
        augment(&mut s, &cfg, &mut sample_rng(5, 0, 1));
        assert_eq!(s.rgb.hflip().data, rgb0.data);
        assert_eq!(s.gt.hflip().data, gt0.data);
    }

    #[test]
    fn constant_depth_normalizes_to_zero() {
        let d = ImageBuf::new(1, 4, 4, vec![0.37; 16]).unwrap();
        let rep = replicate_depth(&d);
        assert_eq!(rep.c, 3);
        assert!(rep.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_replicas_are_identical() {
        let d = toy_gradient(1, 4, 4);
        let rep = replicate_depth(&d);
        let hw = 16;
        assert_eq!(rep.data[0..hw], rep.data[hw..2 * hw]);
        assert_eq!(rep.data[0..hw], rep.data[2 * hw..3 * hw]);
    }

    #[test]
    fn epoch_order_is_deterministic_permutation() {
        let a = epoch_order(10, 42, 3);
        let b = epoch_order(10, 42, 3);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_ne!(a, epoch_order(10, 42, 4));
    }
}
