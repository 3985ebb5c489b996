//! Shared test helpers: deterministic tensors, loop-based oracles for the
//! fusion attention equations, reference metric implementations, a finite
//! difference gradient checker, and synthetic dataset fixtures.
//!
//! Everything here is written framework-free (plain f64 loops) on purpose:
//! these are the independent sides of the dual-route checks.

#![allow(dead_code)]

use std::path::Path;

use candle_core::{Device, Tensor};

// ---------------------------------------------------------------------------
// deterministic value streams

pub struct Lcg(pub u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed.wrapping_mul(0x9E3779B97F4A7C15) | 1)
    }
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
    /// Uniform in [-1, 1).
    pub fn next_sym(&mut self) -> f64 {
        self.next_f64() * 2.0 - 1.0
    }
}

pub fn seeded_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Lcg::new(seed);
    (0..n).map(|_| rng.next_sym()).collect()
}

pub fn tensor_f64(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(seeded_vec(n, seed), shape, &Device::Cpu).unwrap()
}

pub fn tensor_f32(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let vals: Vec<f32> = seeded_vec(n, seed).into_iter().map(|v| v as f32).collect();
    Tensor::from_vec(vals, shape, &Device::Cpu).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a.to_dtype(candle_core::DType::F64).unwrap() - b.to_dtype(candle_core::DType::F64).unwrap())
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

pub fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let av: Vec<f64> = a
        .to_dtype(candle_core::DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    let bv: Vec<f64> = b
        .to_dtype(candle_core::DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    av.iter()
        .zip(&bv)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-9))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// loop oracles for the fusion attention equations
//
// Features are [c][n] with n = y * w + x. Every operation below is an
// explicit index loop over the printed equations.

pub const ORACLE_EPS: f64 = 1e-6;

pub fn m_scalar(x: f64, exponent: f64) -> f64 {
    let s = if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    };
    s * (x.abs() + ORACLE_EPS).powf(exponent)
}

fn l2_denominator(sumsq: f64, power: u8) -> f64 {
    match power {
        2 => sumsq + ORACLE_EPS,
        1 => sumsq.sqrt() + ORACLE_EPS,
        _ => unreachable!(),
    }
}

pub struct PmfOracleOut {
    pub ms_rgb: Vec<Vec<f64>>, // [n][n]
    pub ms_d: Vec<Vec<f64>>,
    pub ms_fu: Vec<Vec<f64>>,
    pub p_rgb: Vec<Vec<f64>>, // [c][n]
    pub p_d: Vec<Vec<f64>>,
    pub p_fu: Vec<Vec<f64>>,
}

/// Position attention, explicit loops: Ms = M(f_sp^T x f_m), summed fused
/// map, P = N(f_m x Ms) with L2 normalization along the position axis.
pub fn pmf_oracle(
    f_rgb: &[Vec<f64>],
    f_d: &[Vec<f64>],
    f_sp: &[Vec<f64>],
    exponent: f64,
    l2_power: u8,
) -> PmfOracleOut {
    let c = f_rgb.len();
    let n = f_rgb[0].len();
    let attention = |f_m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut ms = vec![vec![0f64; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += f_sp[ch][i] * f_m[ch][j];
                }
                ms[i][j] = m_scalar(acc, exponent);
            }
        }
        ms
    };
    let ms_rgb = attention(f_rgb);
    let ms_d = attention(f_d);
    let mut ms_fu = vec![vec![0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            ms_fu[i][j] = ms_rgb[i][j] + ms_d[i][j];
        }
    }
    let refine = |f_m: &[Vec<f64>], ms: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut raw = vec![vec![0f64; n]; c];
        for ch in 0..c {
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += f_m[ch][i] * ms[i][j];
                }
                raw[ch][j] = acc;
            }
        }
        // normalize along the position axis per channel
        for row in raw.iter_mut() {
            let sumsq: f64 = row.iter().map(|v| v * v).sum();
            let denom = l2_denominator(sumsq, l2_power);
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        raw
    };
    let p_rgb = refine(f_rgb, &ms_rgb);
    let p_d = refine(f_d, &ms_d);
    let p_fu = refine(f_sp, &ms_fu);
    PmfOracleOut { ms_rgb, ms_d, ms_fu, p_rgb, p_d, p_fu }
}

pub struct CmfOracleOut {
    pub mc_rgb: Vec<Vec<f64>>, // [c][c]
    pub mc_d: Vec<Vec<f64>>,
    pub mc_fu: Vec<Vec<f64>>,
    pub c_rgb: Vec<Vec<f64>>, // [c][n]
    pub c_d: Vec<Vec<f64>>,
    pub c_fu: Vec<Vec<f64>>,
}

/// Channel attention, explicit loops: Mc = M(f_m x f_ch^T), summed fused
/// map, C = N(Mc x f_m) with L2 normalization along the channel axis.
pub fn cmf_oracle(
    f_rgb: &[Vec<f64>],
    f_d: &[Vec<f64>],
    f_ch: &[Vec<f64>],
    exponent: f64,
    l2_power: u8,
) -> CmfOracleOut {
    let c = f_rgb.len();
    let n = f_rgb[0].len();
    let attention = |f_m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut mc = vec![vec![0f64; c]; c];
        for a in 0..c {
            for b in 0..c {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += f_m[a][i] * f_ch[b][i];
                }
                mc[a][b] = m_scalar(acc, exponent);
            }
        }
        mc
    };
    let mc_rgb = attention(f_rgb);
    let mc_d = attention(f_d);
    let mut mc_fu = vec![vec![0f64; c]; c];
    for a in 0..c {
        for b in 0..c {
            mc_fu[a][b] = mc_rgb[a][b] + mc_d[a][b];
        }
    }
    let refine = |mc: &[Vec<f64>], f_m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut raw = vec![vec![0f64; n]; c];
        for a in 0..c {
            for i in 0..n {
                let mut acc = 0.0;
                for b in 0..c {
                    acc += mc[a][b] * f_m[b][i];
                }
                raw[a][i] = acc;
            }
        }
        // normalize along the channel axis per position
        for i in 0..n {
            let sumsq: f64 = (0..c).map(|a| raw[a][i] * raw[a][i]).sum();
            let denom = l2_denominator(sumsq, l2_power);
            for row in raw.iter_mut() {
                row[i] /= denom;
            }
        }
        raw
    };
    let c_rgb = refine(&mc_rgb, f_rgb);
    let c_d = refine(&mc_d, f_d);
    let c_fu = refine(&mc_fu, f_ch);
    CmfOracleOut { mc_rgb, mc_d, mc_fu, c_rgb, c_d, c_fu }
}

/// Converts a (1, c, h, w) tensor into the oracle's [c][n] layout.
pub fn to_cn(t: &Tensor) -> Vec<Vec<f64>> {
    let (b, c, h, w) = t.dims4().unwrap();
    assert_eq!(b, 1);
    let flat: Vec<f64> = t
        .to_dtype(candle_core::DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    (0..c).map(|ch| flat[ch * h * w..(ch + 1) * h * w].to_vec()).collect()
}

/// Max relative error between a (1, c, h, w) tensor and an oracle map.
pub fn rel_err_cn(t: &Tensor, oracle: &[Vec<f64>]) -> f64 {
    let got = to_cn(t);
    let mut worst = 0f64;
    for (row_g, row_o) in got.iter().zip(oracle) {
        for (&g, &o) in row_g.iter().zip(row_o) {
            let denom = g.abs().max(o.abs()).max(1e-9);
            worst = worst.max((g - o).abs() / denom);
        }
    }
    worst
}

/// Max relative error between a (1, n, m) tensor and an oracle matrix.
pub fn rel_err_nm(t: &Tensor, oracle: &[Vec<f64>]) -> f64 {
    let dims = t.dims();
    assert_eq!(dims[0], 1);
    let (n, m) = (dims[1], dims[2]);
    let flat: Vec<f64> = t
        .to_dtype(candle_core::DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    let mut worst = 0f64;
    for i in 0..n {
        for j in 0..m {
            let g = flat[i * m + j];
            let o = oracle[i][j];
            let denom = g.abs().max(o.abs()).max(1e-9);
            worst = worst.max((g - o).abs() / denom);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking

pub struct GradCheckReport {
    pub n: usize,
    pub violations: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

/// Central finite differences on an f64 tensor against an analytic
/// gradient. A coordinate passes when |fd - a| <= atol + rtol*max(|fd|,|a|).
pub fn check_grad(
    eval: &dyn Fn(&Tensor) -> f64,
    base: &Tensor,
    analytic: &Tensor,
    step: f64,
    rtol: f64,
    atol: f64,
) -> GradCheckReport {
    let shape = base.dims().to_vec();
    let base_v: Vec<f64> = base.flatten_all().unwrap().to_vec1().unwrap();
    let grad_v: Vec<f64> = analytic.flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(base_v.len(), grad_v.len());
    let mut report = GradCheckReport { n: base_v.len(), violations: 0, max_abs_err: 0.0, max_rel_err: 0.0 };
    for i in 0..base_v.len() {
        let mut plus = base_v.clone();
        plus[i] += step;
        let mut minus = base_v.clone();
        minus[i] -= step;
        let fp = eval(&Tensor::from_vec(plus, shape.as_slice(), &Device::Cpu).unwrap());
        let fm = eval(&Tensor::from_vec(minus, shape.as_slice(), &Device::Cpu).unwrap());
        let fd = (fp - fm) / (2.0 * step);
        let a = grad_v[i];
        let abs_err = (fd - a).abs();
        let rel_err = abs_err / fd.abs().max(a.abs()).max(1e-300);
        report.max_abs_err = report.max_abs_err.max(abs_err);
        if abs_err > atol + rtol * fd.abs().max(a.abs()) {
            report.violations += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err);
        }
    }
    report
}

// ---------------------------------------------------------------------------
// reference metric implementations (independent of src/metrics.rs)

/// Reference S-measure: a direct transcription of the published definition
/// with explicit per-region accumulation.
pub fn s_measure_reference(s: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let n = h * w;
    assert_eq!(s.len(), n);
    assert_eq!(g.len(), n);
    let g_mean = g.iter().sum::<f64>() / n as f64;
    let s_mean = s.iter().sum::<f64>() / n as f64;
    if g_mean == 0.0 {
        return 1.0 - s_mean;
    }
    if g_mean == 1.0 {
        return s_mean;
    }

    // object term
    let object = |vals: &mut dyn Iterator<Item = f64>| -> f64 {
        let collected: Vec<f64> = vals.collect();
        if collected.is_empty() {
            return 0.0;
        }
        let m = collected.iter().sum::<f64>() / collected.len() as f64;
        let std = if collected.len() < 2 {
            0.0
        } else {
            (collected.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                / (collected.len() - 1) as f64)
                .sqrt()
        };
        2.0 * m / (m * m + 1.0 + std + f64::EPSILON)
    };
    let fg_score = object(&mut (0..n).filter(|&i| g[i] == 1.0).map(|i| s[i]));
    let bg_score = object(&mut (0..n).filter(|&i| g[i] == 0.0).map(|i| 1.0 - s[i]));
    let s_obj = g_mean * fg_score + (1.0 - g_mean) * bg_score;

    // region term: centroid (1-based, round half away from zero)
    let area: f64 = g.iter().sum();
    let mut x_acc = 0.0;
    let mut y_acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = g[y * w + x];
            x_acc += v * (x + 1) as f64;
            y_acc += v * (y + 1) as f64;
        }
    }
    let cx = ((x_acc / area).round() as usize).clamp(1, w);
    let cy = ((y_acc / area).round() as usize).clamp(1, h);

    let ssim_region = |y0: usize, y1: usize, x0: usize, x1: usize| -> f64 {
        let cnt = (y1 - y0) * (x1 - x0);
        if cnt == 0 {
            return 0.0;
        }
        let mut sx = 0.0;
        let mut sy = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                sx += s[y * w + x];
                sy += g[y * w + x];
            }
        }
        let mx = sx / cnt as f64;
        let my = sy / cnt as f64;
        let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
        if cnt >= 2 {
            for y in y0..y1 {
                for x in x0..x1 {
                    let dx = s[y * w + x] - mx;
                    let dy = g[y * w + x] - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cov += dx * dy;
                }
            }
            vx /= (cnt - 1) as f64;
            vy /= (cnt - 1) as f64;
            cov /= (cnt - 1) as f64;
        }
        let alpha = 4.0 * mx * my * cov;
        let beta = (mx * mx + my * my) * (vx + vy);
        if alpha != 0.0 {
            alpha / (beta + f64::EPSILON)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let total = n as f64;
    let regions = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let mut s_reg = 0.0;
    for (y0, y1, x0, x1) in regions {
        let weight = ((y1 - y0) * (x1 - x0)) as f64 / total;
        if weight > 0.0 {
            s_reg += weight * ssim_region(y0, y1, x0, x1);
        }
    }
    (0.5 * s_obj + 0.5 * s_reg).max(0.0)
}

/// Reference E-measure: per-threshold, per-pixel alignment loops.
pub fn e_measure_reference(s: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    let gt_sum: f64 = g.iter().sum();
    let mut scores = Vec::with_capacity(256);
    for k in 0..256 {
        let t = k as f64 / 255.0;
        let fm: Vec<f64> = s
            .iter()
            .map(|&v| if v * 255.0 + 1e-7 >= t * 255.0 { 1.0 } else { 0.0 })
            .collect();
        let enhanced_sum: f64 = if gt_sum == 0.0 {
            fm.iter().map(|&v| 1.0 - v).sum()
        } else if gt_sum == n as f64 {
            fm.iter().sum()
        } else {
            let mu_f = fm.iter().sum::<f64>() / n as f64;
            let mu_g = gt_sum / n as f64;
            (0..n)
                .map(|i| {
                    let pf = fm[i] - mu_f;
                    let pg = g[i] - mu_g;
                    let align = 2.0 * pg * pf / (pg * pg + pf * pf + f64::EPSILON);
                    (align + 1.0) * (align + 1.0) / 4.0
                })
                .sum()
        };
        scores.push(enhanced_sum / n as f64);
    }
    scores
}

/// Reference per-threshold precision/recall by direct binarization loops.
pub fn pr_reference(s: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut precision = Vec::with_capacity(256);
    let mut recall = Vec::with_capacity(256);
    let n_fg: f64 = g.iter().sum();
    for k in 0..256 {
        let t = k as f64 / 255.0;
        let (mut tp, mut fp) = (0f64, 0f64);
        for i in 0..s.len() {
            if s[i] * 255.0 + 1e-7 >= t * 255.0 {
                if g[i] == 1.0 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        precision.push(if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) });
        recall.push(tp / n_fg);
    }
    (precision, recall)
}

// ---------------------------------------------------------------------------
// synthetic dataset fixtures

/// Writes a toy dataset under `<root>/toy/{RGB,depth,GT}` with `n` samples
/// of a bright disc on a textured background; depth encodes the disc as
/// near. Returns the dataset root (the parent of `toy/`).
pub fn write_toy_dataset(root: &Path, n: usize, size: u32) -> std::path::PathBuf {
    let ds = root.join("toy");
    for sub in ["RGB", "depth", "GT"] {
        std::fs::create_dir_all(ds.join(sub)).unwrap();
    }
    for i in 0..n {
        let s = size as f32;
        let cx = s * (0.3 + 0.4 * (i as f32 / n.max(1) as f32));
        let cy = s * (0.35 + 0.3 * ((i % 2) as f32));
        let r = s * (0.18 + 0.04 * (i % 3) as f32);
        let rgb = image::RgbImage::from_fn(size, size, |x, y| {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let inside = (dx * dx + dy * dy).sqrt() < r;
            if inside {
                image::Rgb([235, 90 + (i as u8 * 30), 60])
            } else {
                let t = ((x / 8 + y / 8) % 2) as u8;
                image::Rgb([40 + 20 * t, 60 + 15 * t, 90 + 10 * t])
            }
        });
        let depth = image::GrayImage::from_fn(size, size, |x, y| {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let inside = (dx * dx + dy * dy).sqrt() < r;
            if inside {
                image::Luma([230u8])
            } else {
                image::Luma([(40.0 + 60.0 * (y as f32 / s)) as u8])
            }
        });
        let gt = image::GrayImage::from_fn(size, size, |x, y| {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            if (dx * dx + dy * dy).sqrt() < r {
                image::Luma([255])
            } else {
                image::Luma([0])
            }
        });
        rgb.save(ds.join("RGB").join(format!("s{i}.png"))).unwrap();
        depth.save(ds.join("depth").join(format!("s{i}.png"))).unwrap();
        gt.save(ds.join("GT").join(format!("s{i}.png"))).unwrap();
    }
    root.to_path_buf()
}
