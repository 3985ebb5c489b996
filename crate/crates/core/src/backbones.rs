//! Encoder branches: one hierarchical CNN encoder per modality, each
//! emitting four stage features at strides 4/8/16/32.
//!
//! Encoders sit behind a declared (strides, channels) profile so the rest of
//! the network never hard-codes a backbone. Pretrained weights are optional;
//! when a safetensors archive is given, both branches load from it,
//! otherwise each branch gets its own random init.

use std::path::{Path, PathBuf};

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d};
use crate::ops;
use crate::params::ParamStore;

/// The four per-stage feature maps emitted by one encoder branch.
pub struct StageFeatures {
    pub stages: [Tensor; 4],
}

impl StageFeatures {
    /// Checks the stride schedule against the input size.
    pub fn validate(&self, h: usize, w: usize, channels: &[usize; 4]) -> Result<()> {
        for (i, t) in self.stages.iter().enumerate() {
            let stride = 4usize << i;
            let (_, c, sh, sw) = t.dims4()?;
            if (sh, sw) != (h / stride, w / stride) {
                return Err(Error::Shape(format!(
                    "stage {} spatial size {}x{} violates the stride-{} schedule for input {}x{}",
                    i + 1,
                    sh,
                    sw,
                    stride,
                    h,
                    w
                )));
            }
            if c != channels[i] {
                return Err(Error::Shape(format!(
                    "stage {} has {} channels, encoder profile declares {}",
                    i + 1,
                    c,
                    channels[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Supported: "resnet50".
    pub family: String,
    /// Optional safetensors archive with the documented parameter names.
    pub weights: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { family: "resnet50".into(), weights: None }
    }
}

/// Common surface for encoder branches.
pub trait Encoder {
    /// Channel count of each emitted stage.
    fn stage_channels(&self) -> [usize; 4];
    fn forward(&self, image: &Tensor, training: bool) -> Result<StageFeatures>;
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(ps: &ParamStore, cin: usize, mid: usize, stride: usize) -> Result<Self> {
        let cout = mid * 4;
        let downsample = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(&ps.sub("downsample.conv"), cin, cout, 1, stride, false)?,
                BatchNorm2d::new(&ps.sub("downsample.bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Bottleneck {
            conv1: Conv2d::new(&ps.sub("conv1"), cin, mid, 1, 1, false)?,
            bn1: BatchNorm2d::new(&ps.sub("bn1"), mid)?,
            conv2: Conv2d::new(&ps.sub("conv2"), mid, mid, 3, stride, false)?,
            bn2: BatchNorm2d::new(&ps.sub("bn2"), mid)?,
            conv3: Conv2d::new(&ps.sub("conv3"), mid, cout, 1, 1, false)?,
            bn3: BatchNorm2d::new(&ps.sub("bn3"), cout)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, training)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, training)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, training)?;
        let short = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, training)?,
            None => x.clone(),
        };
        Ok((y + short)?.relu()?)
    }
}

/// ResNet-50: 7x7/2 stem + 3x3/2 max pool, then (3, 4, 6, 3) bottleneck
/// layers emitting (256, 512, 1024, 2048) channels.
pub struct ResNet50 {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    layers: [Vec<Bottleneck>; 4],
}

const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const RESNET50_MID: [usize; 4] = [64, 128, 256, 512];
pub const RESNET50_CHANNELS: [usize; 4] = [256, 512, 1024, 2048];

impl ResNet50 {
    pub fn new(ps: &ParamStore) -> Result<Self> {
        let stem_conv = Conv2d::new(&ps.sub("stem.conv"), 3, 64, 7, 2, false)?;
        let stem_bn = BatchNorm2d::new(&ps.sub("stem.bn"), 64)?;
        let mut layers: Vec<Vec<Bottleneck>> = Vec::with_capacity(4);
        let mut cin = 64;
        for (li, (&blocks, &mid)) in RESNET50_BLOCKS.iter().zip(RESNET50_MID.iter()).enumerate() {
            let scope = ps.sub(&format!("layer{}", li + 1));
            let mut blocks_v = Vec::with_capacity(blocks);
            for bi in 0..blocks {
                let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                blocks_v.push(Bottleneck::new(&scope.sub(&bi.to_string()), cin, mid, stride)?);
                cin = mid * 4;
            }
            layers.push(blocks_v);
        }
        let layers: [Vec<Bottleneck>; 4] = layers.try_into().map_err(|_| {
            Error::Config("internal: resnet layer construction".into())
        })?;
        Ok(ResNet50 { stem_conv, stem_bn, layers })
    }
}

impl Encoder for ResNet50 {
    fn stage_channels(&self) -> [usize; 4] {
        RESNET50_CHANNELS
    }

    fn forward(&self, image: &Tensor, training: bool) -> Result<StageFeatures> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("encoder expects 3 channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be a multiple of 32 in both dimensions"
            )));
        }
        let x = self
            .stem_bn
            .forward(&self.stem_conv.forward(image)?, training)?
            .relu()?;
        let x = ops::max_pool_3x3_s2(&x)?;
        let s1 = self.layers[0]
            .iter()
            .try_fold(x, |acc, blk| blk.forward(&acc, training))?;
        let s2 = self.layers[1]
            .iter()
            .try_fold(s1.clone(), |acc, blk| blk.forward(&acc, training))?;
        let s3 = self.layers[2]
            .iter()
            .try_fold(s2.clone(), |acc, blk| blk.forward(&acc, training))?;
        let s4 = self.layers[3]
            .iter()
            .try_fold(s3.clone(), |acc, blk| blk.forward(&acc, training))?;
        Ok(StageFeatures { stages: [s1, s2, s3, s4] })
    }
}

/// Builds the RGB and depth branches under `rgb_encoder` / `depth_encoder`
/// scopes. The branches never share parameters; with a weights archive both
/// start from the same values.
pub fn make_dual_encoder(ps: &ParamStore, cfg: &EncoderConfig) -> Result<(ResNet50, ResNet50)> {
    if cfg.family != "resnet50" {
        return Err(Error::Config(format!(
            "unknown encoder family '{}' (supported: resnet50)",
            cfg.family
        )));
    }
    let rgb = ResNet50::new(&ps.sub("rgb_encoder"))?;
    let depth = ResNet50::new(&ps.sub("depth_encoder"))?;
    if let Some(path) = &cfg.weights {
        load_encoder_weights(ps, path)?;
    }
    Ok((rgb, depth))
}

/// Loads a name -> tensor safetensors archive (names like
/// `stem.conv.weight`, `layer1.0.conv2.weight`) into both branches.
pub fn load_encoder_weights(ps: &ParamStore, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "encoder weights file not found: {}",
            path.display()
        )));
    }
    let archive = candle_core::safetensors::load(path, &ps.device())
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if archive.is_empty() {
        return Err(Error::Checkpoint(format!("empty weights archive: {}", path.display())));
    }
    for branch in ["rgb_encoder", "depth_encoder"] {
        let mapped = archive
            .iter()
            .map(|(k, v)| (format!("{branch}.{k}"), v.clone()))
            .collect();
        let applied = ps.load_values(&mapped, true)?;
        if applied == 0 {
            return Err(Error::Checkpoint("weights archive matched no parameters".into()));
        }
    }
    Ok(())
}

/// Exports one branch's parameters with the archive naming (prefix
/// stripped), for producing weights files that `load_encoder_weights` reads.
pub fn export_encoder_weights(ps: &ParamStore, branch: &str, path: &Path) -> Result<()> {
    let prefix = format!("{branch}.");
    let mut map = std::collections::HashMap::new();
    for (name, var, _) in ps.named() {
        if let Some(stripped) = name.strip_prefix(&prefix) {
            map.insert(stripped.to_string(), var.as_tensor().copy()?);
        }
    }
    if map.is_empty() {
        return Err(Error::Checkpoint(format!("no parameters under '{branch}'")));
    }
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

/// extract_stages: one encoder forward with the invariants enforced.
pub fn extract_stages<E: Encoder>(encoder: &E, image: &Tensor, training: bool) -> Result<StageFeatures> {
    let (_, _, h, w) = image.dims4()?;
    let feats = encoder.forward(image, training)?;
    feats.validate(h, w, &encoder.stage_channels())?;
    Ok(feats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn stride_schedule_at_minimum_size() -> Result<()> {
        let ps = ParamStore::new(Device::Cpu, DType::F32, 1);
        let enc = ResNet50::new(&ps.sub("rgb_encoder"))?;
        let x = Tensor::randn(0f32, 1f32, (1, 3, 32, 32), &Device::Cpu)?;
        let feats = extract_stages(&enc, &x, false)?;
        let sizes: Vec<_> = feats.stages.iter().map(|t| t.dims()[2]).collect();
        assert_eq!(sizes, vec![8, 4, 2, 1]);
        let chans: Vec<_> = feats.stages.iter().map(|t| t.dims()[1]).collect();
        assert_eq!(chans, vec![256, 512, 1024, 2048]);
        Ok(())
    }

    #[test]
    fn non_multiple_of_32_rejected() -> Result<()> {
        let ps = ParamStore::new(Device::Cpu, DType::F32, 2);
        let enc = ResNet50::new(&ps.sub("rgb_encoder"))?;
        let x = Tensor::zeros((1, 3, 48, 48), DType::F32, &Device::Cpu)?;
        assert!(matches!(enc.forward(&x, false), Err(Error::Shape(_))));
        Ok(())
    }

    #[test]
    fn unknown_family_rejected() {
        let ps = ParamStore::new(Device::Cpu, DType::F32, 3);
        let cfg = EncoderConfig { family: "vgg".into(), weights: None };
        assert!(matches!(make_dual_encoder(&ps, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn branches_are_independent_params() -> Result<()> {
        let ps = ParamStore::new(Device::Cpu, DType::F32, 4);
        let (rgb, depth) = make_dual_encoder(&ps, &EncoderConfig::default())?;
        let x = Tensor::randn(0f32, 1f32, (1, 3, 32, 32), &Device::Cpu)?;
        let before = depth.forward(&x, false)?.stages[0].copy()?;
        // Perturb one RGB parameter; the depth branch must not move.
        let w = ps.get("rgb_encoder.stem.conv.weight").unwrap();
        w.set(&(w.as_tensor() + 1.0)?)?;
        let after = depth.forward(&x, false)?.stages[0].clone();
        let d = (before - after)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
        assert_eq!(d, 0.0);
        let _ = rgb;
        Ok(())
    }

    #[test]
    fn weights_archive_loads_into_both_branches() -> Result<()> {
        let dir = std::env::temp_dir().join("gl_dmnet_enc_weights_test");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("enc.safetensors");
        let src = ParamStore::new(Device::Cpu, DType::F32, 5);
        let _ = ResNet50::new(&src.sub("rgb_encoder"))?;
        export_encoder_weights(&src, "rgb_encoder", &path)?;

        let ps = ParamStore::new(Device::Cpu, DType::F32, 6);
        let cfg = EncoderConfig { family: "resnet50".into(), weights: Some(path.clone()) };
        let _ = make_dual_encoder(&ps, &cfg)?;
        let a = ps.get("rgb_encoder.stem.conv.weight").unwrap();
        let b = ps.get("depth_encoder.stem.conv.weight").unwrap();
        let d = (a.as_tensor() - b.as_tensor())?
            .abs()?
            .flatten_all()?
            .max(0)?
            .to_scalar::<f32>()?;
        assert_eq!(d, 0.0, "both branches must be bitwise equal after load");
        std::fs::remove_dir_all(&dir).ok();
        Ok(())
    }

    #[test]
    fn missing_weights_file_errors() {
        let ps = ParamStore::new(Device::Cpu, DType::F32, 7);
        let cfg = EncoderConfig {
            family: "resnet50".into(),
            weights: Some(PathBuf::from("/nonexistent/w.safetensors")),
        };
        assert!(matches!(make_dual_encoder(&ps, &cfg), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn inference_is_deterministic() -> Result<()> {
        let ps = ParamStore::new(Device::Cpu, DType::F32, 8);
        let enc = ResNet50::new(&ps.sub("rgb_encoder"))?;
        let x = Tensor::randn(0f32, 1f32, (1, 3, 32, 32), &Device::Cpu)?;
        let a = enc.forward(&x, false)?.stages[3].flatten_all()?.to_vec1::<f32>()?;
        let b = enc.forward(&x, false)?.stages[3].flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(a, b);
        Ok(())
    }
}
