//! Functional tensor operations shared by the network modules.
//!
//! Convolutions are expressed as gather + matmul so both the forward and the
//! backward pass run through the GEMM kernels; the upsampling path is
//! expressed as two interpolation-matrix products for the same reason.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};

/// Zero-pad the two spatial dims of a NCHW tensor by `pad` on each side.
pub fn pad2d_zeros(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let p = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
    Ok(p)
}

fn pad2d_const(x: &Tensor, pad: usize, value: f64) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    let dt = x.dtype();
    let dev = x.device();
    let row = (Tensor::ones((b, c, pad, w), dt, dev)? * value)?;
    let x = Tensor::cat(&[&row, x, &row], 2)?;
    let col = (Tensor::ones((b, c, h + 2 * pad, pad), dt, dev)? * value)?;
    Ok(Tensor::cat(&[&col, &x, &col], 3)?)
}

/// Gather the im2col matrix: (b, c*kh*kw, oh*ow) from a padded input.
fn im2col(xp: &Tensor, kh: usize, kw: usize, stride: usize) -> Result<(Tensor, usize, usize)> {
    let (b, c, hp, wp) = xp.dims4()?;
    if hp < kh || wp < kw {
        return Err(Error::Shape(format!(
            "input {hp}x{wp} smaller than kernel {kh}x{kw}"
        )));
    }
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;
    let mut idx = Vec::with_capacity(kh * kw * oh * ow);
    for di in 0..kh {
        for dj in 0..kw {
            for i in 0..oh {
                let base = (i * stride + di) * wp + dj;
                for j in 0..ow {
                    idx.push((base + j * stride) as u32);
                }
            }
        }
    }
    let idx = Tensor::from_vec(idx, kh * kw * oh * ow, xp.device())?;
    let col = xp.reshape((b, c, hp * wp))?.index_select(&idx, 2)?;
    let col = col.reshape((b, c * kh * kw, oh * ow))?;
    Ok((col, oh, ow))
}

/// 2-D convolution, NCHW input, (cout, cin, kh, kw) weight.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, pad: usize, stride: usize) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let (cout, cin, kh, kw) = w.dims4()?;
    if c != cin {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {c}, weight expects {cin}"
        )));
    }
    let xp = pad2d_zeros(x, pad)?;
    let (col, oh, ow) = im2col(&xp, kh, kw, stride)?;
    // Fold the batch into the column dimension so the backward pass is two
    // plain 2-D GEMMs instead of a batched reduction.
    let col = col
        .reshape((b, cin, kh * kw, oh * ow))?
        .permute((1, 2, 0, 3))?
        .contiguous()?
        .reshape((cin * kh * kw, b * oh * ow))?;
    let w2 = w.reshape((cout, cin * kh * kw))?;
    let y = w2.matmul(&col)?;
    let y = y
        .reshape((cout, b, oh * ow))?
        .transpose(0, 1)?
        .reshape((b, cout, oh, ow))?;
    match bias {
        Some(bv) => Ok(y.broadcast_add(&bv.reshape((1, cout, 1, 1))?)?),
        None => Ok(y),
    }
}

/// Depthwise 3x3-style convolution: weight (c, 1, kh, kw), stride 1.
pub fn conv2d_depthwise(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, pad: usize) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let (cw, one, kh, kw) = w.dims4()?;
    if cw != c || one != 1 {
        return Err(Error::Shape(format!(
            "depthwise weight must be ({c}, 1, k, k), got ({cw}, {one}, {kh}, {kw})"
        )));
    }
    let xp = pad2d_zeros(x, pad)?;
    let (col, oh, ow) = im2col(&xp, kh, kw, 1)?;
    let col = col.reshape((b, c, kh * kw, oh * ow))?;
    let w4 = w.reshape((1, c, kh * kw, 1))?;
    let y = col.broadcast_mul(&w4)?.sum(2)?;
    let y = y.reshape((b, c, oh, ow))?;
    match bias {
        Some(bv) => Ok(y.broadcast_add(&bv.reshape((1, c, 1, 1))?)?),
        None => Ok(y),
    }
}

/// 3x3 stride-2 pad-1 max pool (the ResNet stem pool), built from shifted
/// slices so gradients flow through elementwise `maximum`.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pool expects even spatial size, got {h}x{w}")));
    }
    let neg = if x.dtype() == DType::F64 { -1e300 } else { -1e30 };
    let xp = pad2d_const(x, 1, neg)?;
    let mut m: Option<Tensor> = None;
    for di in 0..3 {
        for dj in 0..3 {
            let s = xp.narrow(2, di, h)?.narrow(3, dj, w)?;
            m = Some(match m {
                None => s,
                Some(acc) => acc.maximum(&s)?,
            });
        }
    }
    let m = m.unwrap().contiguous()?;
    let idx_h = Tensor::from_vec(
        (0..h / 2).map(|i| (2 * i) as u32).collect::<Vec<_>>(),
        h / 2,
        x.device(),
    )?;
    let idx_w = Tensor::from_vec(
        (0..w / 2).map(|i| (2 * i) as u32).collect::<Vec<_>>(),
        w / 2,
        x.device(),
    )?;
    Ok(m.index_select(&idx_h, 2)?.index_select(&idx_w, 3)?)
}

/// Half-pixel bilinear interpolation matrix mapping `inn` samples to `out`.
pub fn bilinear_matrix(out: usize, inn: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut m = vec![0f64; out * inn];
    let scale = inn as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inn - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inn - 1);
        let w1 = src - i0 as f64;
        m[o * inn + i0] += 1.0 - w1;
        m[o * inn + i1] += w1;
    }
    Ok(Tensor::from_vec(m, (out, inn), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of a NCHW tensor (half-pixel sampling). Identity sizes
/// pass the input through untouched.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (oh, ow) == (h, w) {
        return Ok(x.clone());
    }
    let dt = x.dtype();
    let dev = x.device();
    let x3 = x.reshape((b * c, h, w))?;
    let y = if oh != h {
        let r = bilinear_matrix(oh, h, dt, dev)?;
        r.broadcast_matmul(&x3)?
    } else {
        x3
    };
    let y = if ow != w {
        let ct = bilinear_matrix(ow, w, dt, dev)?.t()?.contiguous()?;
        y.broadcast_matmul(&ct)?
    } else {
        y
    };
    Ok(y.reshape((b, c, oh, ow))?)
}

/// Global average pool to (b, c).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.mean(2)?)
}

/// Global max pool to (b, c).
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.max(2)?)
}

/// Per-position max over channels: (b, 1, h, w).
pub fn channel_max(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_keepdim(1)?)
}

/// Per-position mean over channels: (b, 1, h, w).
pub fn channel_avg(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(1)?)
}

pub const NORM_EPS: f64 = 1e-6;

/// Moment normalization: sign(x) * (|x| + eps)^exponent, elementwise.
/// sign(0) = 0, so the map fixes the origin.
pub fn moment_normalize(x: &Tensor, exponent: f64) -> Result<Tensor> {
    let s = x.sign()?.detach();
    let m = ((x.abs()? + NORM_EPS)?).powf(exponent)?;
    Ok(s.mul(&m)?)
}

/// L2 normalization along `dim` as printed: x / (||x||_2^power + eps),
/// power 2 divides by the squared norm, power 1 by the norm.
pub fn l2_normalize(x: &Tensor, dim: usize, power: u8) -> Result<Tensor> {
    let sq = x.sqr()?.sum_keepdim(dim)?;
    let denom = match power {
        2 => sq,
        1 => sq.sqrt()?,
        p => return Err(Error::Config(format!("l2 power must be 1 or 2, got {p}"))),
    };
    Ok(x.broadcast_div(&(denom + NORM_EPS)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}
