//! Supervision over the four deeply supervised outputs: BCE + IoU by
//! default, with DICE and SSIM alternatives for the loss ablation.
//!
//! BCE is summed over pixels per image (as printed) and averaged over the
//! batch; IoU/DICE/SSIM are per-image scores in [0, 1] averaged over the
//! batch. The level weights default to (0.8, 0.6, 0.4, 0.2).

use std::str::FromStr;

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::ops;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    BceIou,
    Bce,
    BceDice,
    BceSsim,
}

impl FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce+iou" => Ok(LossVariant::BceIou),
            "bce" => Ok(LossVariant::Bce),
            "bce+dice" => Ok(LossVariant::BceDice),
            "bce+ssim" => Ok(LossVariant::BceSsim),
            other => Err(Error::Config(format!(
                "unknown loss.variant '{other}' (expected bce+iou|bce|bce+dice|bce+ssim)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub lambdas: [f64; 4],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { variant: LossVariant::BceIou, lambdas: [0.8, 0.6, 0.4, 0.2] }
    }
}

/// Per-level (bce, secondary) pairs plus the weighted total.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub per_level: [(f64, f64); 4],
    pub total: f64,
}

fn check_pair(s: &Tensor, g: &Tensor) -> Result<()> {
    if s.dims() != g.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            s.dims(),
            g.dims()
        )));
    }
    Ok(())
}

/// Errors unless every ground-truth value is exactly 0 or 1.
pub fn check_binary(g: &Tensor) -> Result<()> {
    let dev = g.mul(&(1.0 - g)?)?.abs()?.flatten_all()?.max(0)?;
    let dev = dev.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if dev != 0.0 {
        return Err(Error::Data("ground truth is not binary".into()));
    }
    Ok(())
}

/// Sum over (c, h, w) per image, then mean over the batch: scalar tensor.
fn per_image_sum_mean(x: &Tensor) -> Result<Tensor> {
    let b = x.dims()[0];
    Ok(x.reshape((b, ()))?.sum(D::Minus1)?.mean(0)?)
}

/// BCE from probabilities, clamped to [eps, 1-eps].
pub fn bce_probs(s: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair(s, g)?;
    check_binary(g)?;
    let s = s.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let per_pixel = (g.mul(&s.log()?)? + (1.0 - g)?.mul(&(1.0 - &s)?.log()?)?)?.neg()?;
    per_image_sum_mean(&per_pixel)
}

/// BCE from logits via the numerically stable form
/// max(x, 0) - x*g + log(1 + exp(-|x|)).
pub fn bce_with_logits(logits: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair(logits, g)?;
    check_binary(g)?;
    let relu = logits.relu()?;
    let prod = logits.mul(g)?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    per_image_sum_mean(&((relu - prod)? + softplus)?)
}

/// 1 - intersection / union, per image, batch mean. The eps guard kicks in
/// only for an all-zero union (S and G both empty), which scores 1.
pub fn iou_loss(s: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair(s, g)?;
    let b = s.dims()[0];
    let inter = s.mul(g)?.reshape((b, ()))?.sum(D::Minus1)?;
    let union = ((s + g)? - s.mul(g)?)?.reshape((b, ()))?.sum(D::Minus1)?;
    let empty = union.eq(0.0)?.to_dtype(union.dtype())?.detach();
    let frac = inter.div(&(union + (empty * PROB_EPS)?)?)?;
    Ok((1.0 - frac.mean(0)?)?)
}

/// 1 - 2*|S.G| / (|S| + |G|), per image, batch mean.
pub fn dice_loss(s: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair(s, g)?;
    let b = s.dims()[0];
    let inter = s.mul(g)?.reshape((b, ()))?.sum(D::Minus1)?;
    let sums = (s + g)?.reshape((b, ()))?.sum(D::Minus1)?;
    let frac = (inter * 2.0)?.div(&(sums + PROB_EPS)?)?;
    Ok((1.0 - frac.mean(0)?)?)
}

fn gaussian_window(dtype: candle_core::DType, dev: &candle_core::Device) -> Result<Tensor> {
    const SIZE: usize = 11;
    const SIGMA: f64 = 1.5;
    let mut g = [0f64; SIZE];
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - (SIZE as f64 - 1.0) / 2.0;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    let mut w = vec![0f64; SIZE * SIZE];
    for i in 0..SIZE {
        for j in 0..SIZE {
            w[i * SIZE + j] = (g[i] / sum) * (g[j] / sum);
        }
    }
    Ok(Tensor::from_vec(w, (1, 1, SIZE, SIZE), dev)?.to_dtype(dtype)?)
}

/// 1 - mean SSIM with the standard 11x11 Gaussian window (sigma 1.5) on a
/// unit data range.
pub fn ssim_loss(s: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair(s, g)?;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let win = gaussian_window(s.dtype(), s.device())?;
    let conv = |x: &Tensor| ops::conv2d(x, &win, None, 5, 1);
    let mu_s = conv(s)?;
    let mu_g = conv(g)?;
    let mu_ss = mu_s.sqr()?;
    let mu_gg = mu_g.sqr()?;
    let mu_sg = mu_s.mul(&mu_g)?;
    let sigma_s = (conv(&s.sqr()?)? - &mu_ss)?;
    let sigma_g = (conv(&g.sqr()?)? - &mu_gg)?;
    let sigma_sg = (conv(&s.mul(g)?)? - &mu_sg)?;
    let num = ((mu_sg * 2.0)? + C1)?.mul(&((sigma_sg * 2.0)? + C2)?)?;
    let den = ((mu_ss + mu_gg)? + C1)?.mul(&((sigma_s + sigma_g)? + C2)?)?;
    let ssim = num.div(&den)?;
    Ok((1.0 - ssim.mean_all()?)?)
}

/// Weighted deep-supervision total over four logit maps.
/// Returns the differentiable total plus the per-level breakdown.
pub fn total_loss(
    logits: &[Tensor; 4],
    g: &Tensor,
    cfg: &LossConfig,
) -> Result<(Tensor, LossBreakdown)> {
    let mut total: Option<Tensor> = None;
    let mut per_level = [(0f64, 0f64); 4];
    for (i, l) in logits.iter().enumerate() {
        let bce = bce_with_logits(l, g)?;
        let s = ops::sigmoid(l)?;
        let secondary = match cfg.variant {
            LossVariant::BceIou => Some(iou_loss(&s, g)?),
            LossVariant::Bce => None,
            LossVariant::BceDice => Some(dice_loss(&s, g)?),
            LossVariant::BceSsim => Some(ssim_loss(&s, g)?),
        };
        let level = match &secondary {
            Some(sec) => (&bce + sec)?,
            None => bce.clone(),
        };
        per_level[i] = (
            bce.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?,
            secondary
                .map(|t| t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>())
                .transpose()?
                .unwrap_or(0.0),
        );
        let weighted = (level * cfg.lambdas[i])?;
        total = Some(match total {
            None => weighted,
            Some(acc) => (acc + weighted)?,
        });
    }
    let total = total.unwrap();
    let value = total.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    Ok((total, LossBreakdown { per_level, total: value }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn perfect_prediction_bce_near_zero() -> Result<()> {
        let g = Tensor::from_vec(vec![1f64, 0.0, 1.0, 0.0], (1, 1, 2, 2), &dev())?;
        let loss = bce_probs(&g, &g)?.to_scalar::<f64>()?;
        assert!(loss >= 0.0 && loss < 1e-3, "loss {loss}");
        Ok(())
    }

    #[test]
    fn uniform_half_bce_is_n_log2() -> Result<()> {
        let s = (Tensor::ones((1, 1, 2, 2), DType::F64, &dev())? * 0.5)?;
        let g = Tensor::from_vec(vec![1f64, 0.0, 0.0, 1.0], (1, 1, 2, 2), &dev())?;
        let loss = bce_probs(&s, &g)?.to_scalar::<f64>()?;
        assert!((loss - 4.0 * (2f64).ln()).abs() < 1e-9, "loss {loss}");
        Ok(())
    }

    #[test]
    fn bce_rejects_non_binary_gt() {
        let s = (Tensor::ones((1, 1, 2, 2), DType::F64, &dev()).unwrap() * 0.5).unwrap();
        let g = (Tensor::ones((1, 1, 2, 2), DType::F64, &dev()).unwrap() * 0.3).unwrap();
        assert!(matches!(bce_probs(&s, &g), Err(Error::Data(_))));
    }

    #[test]
    fn bce_logits_matches_probs_path() -> Result<()> {
        let logits = Tensor::from_vec(vec![0.3f64, -1.2, 2.0, -0.4], (1, 1, 2, 2), &dev())?;
        let g = Tensor::from_vec(vec![1f64, 0.0, 1.0, 1.0], (1, 1, 2, 2), &dev())?;
        let a = bce_with_logits(&logits, &g)?.to_scalar::<f64>()?;
        let b = bce_probs(&ops::sigmoid(&logits)?, &g)?.to_scalar::<f64>()?;
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        Ok(())
    }

    #[test]
    fn iou_identities() -> Result<()> {
        let g = Tensor::from_vec(vec![1f64, 0.0, 1.0, 1.0], (1, 1, 2, 2), &dev())?;
        assert!(iou_loss(&g, &g)?.to_scalar::<f64>()? < 1e-9);
        let ones = Tensor::ones((1, 1, 2, 2), DType::F64, &dev())?;
        let half = (&ones * 0.5)?;
        let v = iou_loss(&half, &ones)?.to_scalar::<f64>()?;
        assert!((v - 0.5).abs() < 1e-9, "{v}");
        let zeros = ones.zeros_like()?;
        assert!((iou_loss(&zeros, &ones)?.to_scalar::<f64>()? - 1.0).abs() < 1e-9);
        Ok(())
    }

    #[test]
    fn iou_bounded_and_monotone_toward_gt() -> Result<()> {
        let g = Tensor::from_vec(vec![1f64, 0.0, 1.0, 0.0], (1, 1, 2, 2), &dev())?;
        let s0 = Tensor::from_vec(vec![0.2f64, 0.7, 0.4, 0.6], (1, 1, 2, 2), &dev())?;
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            // Move S toward G along the straight line.
            let s = ((&s0 * (1.0 - t))? + (&g * t)?)?;
            let v = iou_loss(&s, &g)?.to_scalar::<f64>()?;
            assert!((0.0..=1.0).contains(&v));
            assert!(v <= prev + 1e-12, "IoU loss must not increase toward GT");
            prev = v;
        }
        Ok(())
    }

    #[test]
    fn total_weights_sum_to_two() -> Result<()> {
        // Identical logits at every level: total = (sum of lambdas) * level
        // value = 2.0 * v.
        let l = Tensor::from_vec(vec![0.4f64, -0.3, 1.0, 0.2], (1, 1, 2, 2), &dev())?;
        let g = Tensor::from_vec(vec![1f64, 0.0, 1.0, 0.0], (1, 1, 2, 2), &dev())?;
        let cfg = LossConfig::default();
        let (_, breakdown) = total_loss(&[l.clone(), l.clone(), l.clone(), l.clone()], &g, &cfg)?;
        let v = breakdown.per_level[0].0 + breakdown.per_level[0].1;
        assert!((breakdown.total - 2.0 * v).abs() < 1e-9);
        Ok(())
    }

    #[test]
    fn lambda_override_selects_single_level() -> Result<()> {
        let l1 = Tensor::from_vec(vec![0.4f64, -0.3, 1.0, 0.2], (1, 1, 2, 2), &dev())?;
        let l2 = Tensor::from_vec(vec![2.0f64, 0.1, -1.0, 0.5], (1, 1, 2, 2), &dev())?;
        let g = Tensor::from_vec(vec![1f64, 0.0, 1.0, 0.0], (1, 1, 2, 2), &dev())?;
        let cfg = LossConfig { variant: LossVariant::BceIou, lambdas: [1.0, 0.0, 0.0, 0.0] };
        let (_, breakdown) = total_loss(&[l1.clone(), l2.clone(), l2.clone(), l2], &g, &cfg)?;
        let level1 = breakdown.per_level[0].0 + breakdown.per_level[0].1;
        assert!((breakdown.total - level1).abs() < 1e-9);
        Ok(())
    }

    #[test]
    fn dice_and_ssim_variants_finite() -> Result<()> {
        let l = Tensor::randn(0f32, 1f32, (2, 1, 16, 16), &dev())?;
        let g = l.ge(0.0)?.to_dtype(DType::F32)?;
        for variant in [LossVariant::BceDice, LossVariant::BceSsim, LossVariant::Bce] {
            let cfg = LossConfig { variant, lambdas: [0.8, 0.6, 0.4, 0.2] };
            let (_, b) = total_loss(&[l.clone(), l.clone(), l.clone(), l.clone()], &g, &cfg)?;
            assert!(b.total.is_finite() && b.total >= 0.0);
        }
        Ok(())
    }
}
