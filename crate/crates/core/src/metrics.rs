//! Saliency evaluation: MAE, max F-measure with the 256-threshold PR curve,
//! S-measure and E-measure, plus directory-level aggregation matching the
//! conventions of the standard evaluation toolboxes.
//!
//! All metrics run in f64 on plain buffers. Predictions are taken as-is by
//! the per-map operations; `evaluate_dataset` resizes each prediction to its
//! ground-truth size (bilinear, only when sizes differ) and min-max
//! normalizes it per image before scoring, as the toolboxes do.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const F_BETA2: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;
pub const THRESHOLDS: usize = 256;

/// Single-channel f64 image in row-major order.
#[derive(Debug, Clone)]
pub struct GrayMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl GrayMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "gray map {}x{} needs {} values, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        Ok(GrayMap { h, w, data })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        GrayMap::new(h as usize, w as usize, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn binarize(&self, threshold: f64) -> GrayMap {
        GrayMap {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Per-image min-max normalization: (v - min) / (max - min + eps), with
    /// machine epsilon so already-binary maps stay effectively exact.
    pub fn normalize_minmax(&self) -> GrayMap {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let denom = hi - lo + f64::EPSILON;
        GrayMap {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| (v - lo) / denom).collect(),
        }
    }

    /// Half-pixel bilinear resize. Identity sizes return a plain copy with
    /// no resampling.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> GrayMap {
        if (oh, ow) == (self.h, self.w) {
            return self.clone();
        }
        let mut out = vec![0f64; oh * ow];
        let sy = self.h as f64 / oh as f64;
        let sx = self.w as f64 / ow as f64;
        for oy in 0..oh {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..ow {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let wx = fx - x0 as f64;
                let top = self.data[y0 * self.w + x0] * (1.0 - wx) + self.data[y0 * self.w + x1] * wx;
                let bot = self.data[y1 * self.w + x0] * (1.0 - wx) + self.data[y1 * self.w + x1] * wx;
                out[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
        GrayMap { h: oh, w: ow, data: out }
    }
}

fn check_pair(s: &GrayMap, g: &GrayMap) -> Result<()> {
    if (s.h, s.w) != (g.h, g.w) {
        return Err(Error::Shape(format!(
            "prediction {}x{} and ground truth {}x{} differ",
            s.h, s.w, g.h, g.w
        )));
    }
    if !g.is_binary() {
        return Err(Error::Data("ground truth mask is not binary".into()));
    }
    Ok(())
}

/// Mean absolute difference over all pixels.
pub fn mae(s: &GrayMap, g: &GrayMap) -> Result<f64> {
    check_pair(s, g)?;
    let sum: f64 = s.data.iter().zip(&g.data).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / s.data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct PrCurve {
    /// Indexed by threshold k, t = k/255, binarization S >= t.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    pub fn f_measure(&self) -> Vec<f64> {
        self.precision
            .iter()
            .zip(&self.recall)
            .map(|(&p, &r)| {
                let den = F_BETA2 * p + r;
                if den == 0.0 {
                    0.0
                } else {
                    (1.0 + F_BETA2) * p * r / den
                }
            })
            .collect()
    }

    pub fn f_max(&self) -> f64 {
        self.f_measure().into_iter().fold(0.0, f64::max)
    }
}

/// Histogram of quantized prediction values split by ground-truth class.
/// For threshold k, suffix sums give TP/FP directly.
fn class_histograms(s: &GrayMap, g: &GrayMap) -> ([u64; THRESHOLDS], [u64; THRESHOLDS]) {
    let mut fg = [0u64; THRESHOLDS];
    let mut bg = [0u64; THRESHOLDS];
    for (v, gv) in s.data.iter().zip(&g.data) {
        let bin = ((v * 255.0 + 1e-7).floor() as i64).clamp(0, 255) as usize;
        if *gv == 1.0 {
            fg[bin] += 1;
        } else {
            bg[bin] += 1;
        }
    }
    (fg, bg)
}

fn suffix_sums(hist: &[u64; THRESHOLDS]) -> [u64; THRESHOLDS] {
    let mut out = [0u64; THRESHOLDS];
    let mut acc = 0;
    for k in (0..THRESHOLDS).rev() {
        acc += hist[k];
        out[k] = acc;
    }
    out
}

/// Precision/recall over 256 binarization thresholds and the per-image max
/// F-measure. Errors when the ground truth has no foreground; callers doing
/// dataset aggregation exclude such images and count them.
pub fn f_measure_curve(s: &GrayMap, g: &GrayMap) -> Result<(PrCurve, f64)> {
    check_pair(s, g)?;
    let n_fg: f64 = g.data.iter().sum();
    if n_fg == 0.0 {
        return Err(Error::Data(
            "ground truth has no foreground; image excluded from F/PR aggregation".into(),
        ));
    }
    let (fg, bg) = class_histograms(s, g);
    let tp = suffix_sums(&fg);
    let fp = suffix_sums(&bg);
    let mut precision = Vec::with_capacity(THRESHOLDS);
    let mut recall = Vec::with_capacity(THRESHOLDS);
    for k in 0..THRESHOLDS {
        let predicted = tp[k] + fp[k];
        let p = if predicted == 0 { 0.0 } else { tp[k] as f64 / predicted as f64 };
        precision.push(p);
        recall.push(tp[k] as f64 / n_fg);
    }
    let curve = PrCurve { precision, recall };
    let f_max = curve.f_max();
    Ok((curve, f_max))
}

fn sample_std(values: impl Iterator<Item = f64> + Clone, mean: f64, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

fn object_score(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = sample_std(values.iter().copied(), mean, n);
    2.0 * mean / (mean * mean + 1.0 + std + f64::EPSILON)
}

fn s_object(s: &GrayMap, g: &GrayMap) -> f64 {
    let fg: Vec<f64> = s
        .data
        .iter()
        .zip(&g.data)
        .filter(|(_, &gv)| gv == 1.0)
        .map(|(&sv, _)| sv)
        .collect();
    let bg: Vec<f64> = s
        .data
        .iter()
        .zip(&g.data)
        .filter(|(_, &gv)| gv == 0.0)
        .map(|(&sv, _)| 1.0 - sv)
        .collect();
    let mu = g.mean();
    mu * object_score(&fg) + (1.0 - mu) * object_score(&bg)
}

/// Foreground centroid, 1-based with round-half-away like the reference
/// toolbox; callers split blocks at the returned (x, y).
fn centroid(g: &GrayMap) -> (usize, usize) {
    let area: f64 = g.data.iter().sum();
    if area == 0.0 {
        return ((g.w as f64 / 2.0).round() as usize, (g.h as f64 / 2.0).round() as usize);
    }
    let mut x_acc = 0.0;
    let mut y_acc = 0.0;
    for i in 0..g.h {
        for j in 0..g.w {
            let v = g.data[i * g.w + j];
            x_acc += v * (j + 1) as f64;
            y_acc += v * (i + 1) as f64;
        }
    }
    ((x_acc / area).round() as usize, (y_acc / area).round() as usize)
}

fn block(m: &GrayMap, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for i in rows {
        for j in cols.clone() {
            out.push(m.data[i * m.w + j]);
        }
    }
    out
}

/// Region SSIM on one block pair (sample variance/covariance; blocks with
/// fewer than two pixels score with zero spread).
fn region_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let xm = x.iter().sum::<f64>() / n as f64;
    let ym = y.iter().sum::<f64>() / n as f64;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n >= 2 {
        for k in 0..n {
            sx += (x[k] - xm) * (x[k] - xm);
            sy += (y[k] - ym) * (y[k] - ym);
            sxy += (x[k] - xm) * (y[k] - ym);
        }
        sx /= (n - 1) as f64;
        sy /= (n - 1) as f64;
        sxy /= (n - 1) as f64;
    }
    let alpha = 4.0 * xm * ym * sxy;
    let beta = (xm * xm + ym * ym) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(s: &GrayMap, g: &GrayMap) -> f64 {
    let (cx, cy) = centroid(g);
    let cx = cx.clamp(1, g.w);
    let cy = cy.clamp(1, g.h);
    let total = (g.h * g.w) as f64;
    let splits = [
        (0..cy, 0..cx),
        (0..cy, cx..g.w),
        (cy..g.h, 0..cx),
        (cy..g.h, cx..g.w),
    ];
    let mut score = 0.0;
    for (rows, cols) in splits {
        let weight = (rows.len() * cols.len()) as f64 / total;
        if weight == 0.0 {
            continue;
        }
        let sb = block(s, rows.clone(), cols.clone());
        let gb = block(g, rows, cols);
        score += weight * region_ssim(&sb, &gb);
    }
    score
}

/// Structure measure: alpha-blend of object- and region-level similarity,
/// with the toolbox's degenerate handling for empty / full ground truth.
pub fn s_measure(s: &GrayMap, g: &GrayMap) -> Result<f64> {
    check_pair(s, g)?;
    let y = g.mean();
    if y == 0.0 {
        return Ok(1.0 - s.mean());
    }
    if y == 1.0 {
        return Ok(s.mean());
    }
    let q = S_ALPHA * s_object(s, g) + (1.0 - S_ALPHA) * s_region(s, g);
    Ok(q.max(0.0))
}

/// Per-threshold enhanced-alignment scores.
#[derive(Debug, Clone)]
pub struct EMeasure {
    pub scores: Vec<f64>,
}

impl EMeasure {
    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
    pub fn min(&self) -> f64 {
        self.scores.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Enhanced-alignment measure over the 256 thresholds. On binary maps the
/// alignment takes one value per (prediction, truth) cell, so each
/// threshold reduces to a closed form over the confusion counts.
pub fn e_measure(s: &GrayMap, g: &GrayMap) -> Result<EMeasure> {
    check_pair(s, g)?;
    let n = (s.h * s.w) as f64;
    let n_fg: f64 = g.data.iter().sum();
    let (fg, bg) = class_histograms(s, g);
    let tp = suffix_sums(&fg);
    let fp = suffix_sums(&bg);
    let enhanced = |a: f64, b: f64| -> f64 {
        let align = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
        (align + 1.0) * (align + 1.0) / 4.0
    };
    let mut scores = Vec::with_capacity(THRESHOLDS);
    for k in 0..THRESHOLDS {
        let tp_k = tp[k] as f64;
        let fp_k = fp[k] as f64;
        let fn_k = n_fg - tp_k;
        let tn_k = (n - n_fg) - fp_k;
        let enh_sum = if n_fg == 0.0 {
            // Empty ground truth: enhanced = 1 - FM.
            n - (tp_k + fp_k)
        } else if n_fg == n {
            // Full-frame ground truth: enhanced = FM.
            tp_k + fp_k
        } else {
            let mu = n_fg / n;
            let p = (tp_k + fp_k) / n;
            let phi_g_fg = 1.0 - mu;
            let phi_g_bg = -mu;
            let phi_f_fg = 1.0 - p;
            let phi_f_bg = -p;
            tp_k * enhanced(phi_g_fg, phi_f_fg)
                + fp_k * enhanced(phi_g_bg, phi_f_fg)
                + fn_k * enhanced(phi_g_fg, phi_f_bg)
                + tn_k * enhanced(phi_g_bg, phi_f_bg)
        };
        // Enhanced terms are averaged over pixels (exact-N normalization,
        // so a perfect prediction scores exactly 1 at any size).
        scores.push(enh_sum / n);
    }
    Ok(EMeasure { scores })
}

/// Dataset-level scores. `f_max` is the max over thresholds of the
/// F-measure computed from the dataset-averaged PR curve (toolbox
/// convention); `f_max_per_image` is the mean of per-image maxima, emitted
/// for transparency. The E-measure headline is the per-image max over
/// thresholds (flagged in the report; the per-threshold mean is also kept).
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub n_images: usize,
    pub n_excluded_empty_gt: usize,
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure_max: f64,
    pub e_measure_mean: f64,
    pub f_max: f64,
    pub f_max_per_image: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl MetricReport {
    pub fn pr_curve(&self) -> PrCurve {
        PrCurve { precision: self.precision.clone(), recall: self.recall.clone() }
    }

    /// Key-value report block.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("n_images = {}\n", self.n_images));
        out.push_str(&format!("excluded_empty_gt = {}\n", self.n_excluded_empty_gt));
        out.push_str(&format!("mae = {:.6}\n", self.mae));
        out.push_str(&format!("s_measure = {:.6}\n", self.s_measure));
        out.push_str(&format!("e_measure = {:.6}\n", self.e_measure_max));
        out.push_str(&format!("e_measure_mean = {:.6}\n", self.e_measure_mean));
        out.push_str("e_measure_headline = max_over_thresholds\n");
        out.push_str(&format!("f_max = {:.6}\n", self.f_max));
        out.push_str(&format!("f_max_per_image = {:.6}\n", self.f_max_per_image));
        out
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    /// One benchmark-table row: E, S, F, MAE.
    pub fn table_row(&self) -> String {
        format!(
            "{:.3} {:.3} {:.3} {:.3}",
            self.e_measure_max, self.s_measure, self.f_max, self.mae
        )
    }

    pub fn write_pr_csv(&self, path: &Path) -> Result<()> {
        let f = self.pr_curve().f_measure();
        let mut out = String::from("threshold,precision,recall,fmeasure\n");
        for k in 0..THRESHOLDS {
            out.push_str(&format!(
                "{:.6},{:.6},{:.6},{:.6}\n",
                k as f64 / 255.0,
                self.precision[k],
                self.recall[k],
                f[k]
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn stem_map(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if let Some(ext) = ext {
            if IMAGE_EXTS.contains(&ext.as_str()) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.insert(stem.to_string(), path.clone());
                }
            }
        }
    }
    Ok(out)
}

/// Scores for one (already aligned and normalized) prediction/GT pair.
pub struct PairScores {
    pub mae: f64,
    pub s: f64,
    pub e_max: f64,
    pub e_mean: f64,
    pub f: Option<(PrCurve, f64)>,
}

pub fn evaluate_pair(pred: &GrayMap, gt: &GrayMap) -> Result<PairScores> {
    let mae_v = mae(pred, gt)?;
    let s_v = s_measure(pred, gt)?;
    let e = e_measure(pred, gt)?;
    let f = if gt.data.iter().sum::<f64>() > 0.0 {
        Some(f_measure_curve(pred, gt)?)
    } else {
        None
    };
    Ok(PairScores { mae: mae_v, s: s_v, e_max: e.max(), e_mean: e.mean(), f })
}

/// Running aggregation of per-image scores into a dataset report.
#[derive(Default)]
pub struct DatasetAccumulator {
    n: usize,
    n_f: usize,
    n_excluded: usize,
    mae_sum: f64,
    s_sum: f64,
    e_max_sum: f64,
    e_mean_sum: f64,
    f_max_sum: f64,
    p_sum: Vec<f64>,
    r_sum: Vec<f64>,
}

impl DatasetAccumulator {
    pub fn new() -> Self {
        DatasetAccumulator { p_sum: vec![0.0; THRESHOLDS], r_sum: vec![0.0; THRESHOLDS], ..Default::default() }
    }

    pub fn add(&mut self, scores: &PairScores) {
        self.n += 1;
        self.mae_sum += scores.mae;
        self.s_sum += scores.s;
        self.e_max_sum += scores.e_max;
        self.e_mean_sum += scores.e_mean;
        match &scores.f {
            Some((curve, fmax)) => {
                self.f_max_sum += fmax;
                for k in 0..THRESHOLDS {
                    self.p_sum[k] += curve.precision[k];
                    self.r_sum[k] += curve.recall[k];
                }
                self.n_f += 1;
            }
            None => self.n_excluded += 1,
        }
    }

    pub fn finish(self) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::Data("no images evaluated".into()));
        }
        let n = self.n as f64;
        let (precision, recall): (Vec<f64>, Vec<f64>) = if self.n_f > 0 {
            (
                self.p_sum.iter().map(|v| v / self.n_f as f64).collect(),
                self.r_sum.iter().map(|v| v / self.n_f as f64).collect(),
            )
        } else {
            (vec![0.0; THRESHOLDS], vec![0.0; THRESHOLDS])
        };
        let mean_curve = PrCurve { precision: precision.clone(), recall: recall.clone() };
        Ok(MetricReport {
            n_images: self.n,
            n_excluded_empty_gt: self.n_excluded,
            mae: self.mae_sum / n,
            s_measure: self.s_sum / n,
            e_measure_max: self.e_max_sum / n,
            e_measure_mean: self.e_mean_sum / n,
            f_max: mean_curve.f_max(),
            f_max_per_image: if self.n_f > 0 { self.f_max_sum / self.n_f as f64 } else { 0.0 },
            precision,
            recall,
        })
    }
}

/// Evaluate every same-stem prediction/GT pair under two directories.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let preds = stem_map(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::Data(format!(
            "no prediction images found in {}",
            pred_dir.display()
        )));
    }
    let gts = stem_map(gt_dir)?;
    let mut acc = DatasetAccumulator::new();
    for (stem, pred_path) in &preds {
        let gt_path = gts
            .get(stem)
            .ok_or_else(|| Error::MissingFile(gt_dir.join(format!("{stem}.*"))))?;
        let gt = GrayMap::from_file(gt_path)?.binarize(0.5);
        let pred = GrayMap::from_file(pred_path)?
            .resize_bilinear(gt.h, gt.w)
            .normalize_minmax();
        acc.add(&evaluate_pair(&pred, &gt)?);
    }
    acc.finish()
}
