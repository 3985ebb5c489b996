//! Dual mutual fusion: per-stage cross-modal feature fusion built from a
//! spatial pre-fusion + position mutual attention branch and a channel
//! pre-fusion + channel mutual attention branch.
//!
//! Position attention maps are N x N (N = H*W) over pixel positions; channel
//! attention maps are C x C. Both are squashed by the signed-power moment
//! normalization and the refined features by the printed L2 normalization
//! (division by the squared norm by default; both exponents are config
//! switches).

use std::str::FromStr;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::layers::{ConvBnRelu, Linear};
use crate::ops;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// PMF + CMF evaluated side by side and summed (the default wiring).
    Parallel,
    /// PMF first; its output becomes the fused carrier fed to CMF.
    Serial,
    PmfOnly,
    CmfOnly,
    /// Channel reduction, concatenation and a 1x1 projection; no attention.
    ConcatOnly,
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(FusionMode::Parallel),
            "serial" => Ok(FusionMode::Serial),
            "pmf-only" => Ok(FusionMode::PmfOnly),
            "cmf-only" => Ok(FusionMode::CmfOnly),
            "concat-only" => Ok(FusionMode::ConcatOnly),
            other => Err(Error::Config(format!(
                "unknown fusion.mode '{other}' (expected parallel|serial|pmf-only|cmf-only|concat-only)"
            ))),
        }
    }
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Parallel => "parallel",
            FusionMode::Serial => "serial",
            FusionMode::PmfOnly => "pmf-only",
            FusionMode::CmfOnly => "cmf-only",
            FusionMode::ConcatOnly => "concat-only",
        }
    }
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Parallel,
        FusionMode::Serial,
        FusionMode::PmfOnly,
        FusionMode::CmfOnly,
        FusionMode::ConcatOnly,
    ];
}

#[derive(Debug, Clone)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Fused channel width per stage; chosen to match the decoder's
    /// transformer stage widths so no adapters are needed.
    pub widths: [usize; 4],
    /// Hard cap on N = H*W in the position attention; beyond it the N x N
    /// map would be unreasonably large and the stage errors out.
    pub max_attention_pixels: usize,
    /// Exponent of the moment normalization (printed form: -0.5).
    pub moment_exponent: f64,
    /// 2 divides by the squared L2 norm (printed form), 1 by the norm.
    pub l2_power: u8,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::Parallel,
            widths: [64, 128, 320, 512],
            max_attention_pixels: 4096,
            moment_exponent: -0.5,
            l2_power: 2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("fusion.widths must all be positive".into()));
        }
        if self.max_attention_pixels == 0 {
            return Err(Error::Config("fusion.max_attention_pixels must be positive".into()));
        }
        if self.l2_power != 1 && self.l2_power != 2 {
            return Err(Error::Config("fusion.l2_power must be 1 or 2".into()));
        }
        if self.moment_exponent != -0.5 && self.moment_exponent != 0.5 {
            return Err(Error::Config("fusion.moment_exponent must be -0.5 or 0.5".into()));
        }
        Ok(())
    }
}

/// Position attention maps and refined features (the attention core,
/// without the merge convolutions).
#[derive(Debug)]
pub struct PmfAttention {
    pub ms_rgb: Tensor,
    pub ms_d: Tensor,
    pub ms_fu: Tensor,
    pub p_rgb: Tensor,
    pub p_d: Tensor,
    pub p_fu: Tensor,
}

/// Channel attention maps and refined features.
#[derive(Debug)]
pub struct CmfAttention {
    pub mc_rgb: Tensor,
    pub mc_d: Tensor,
    pub mc_fu: Tensor,
    pub c_rgb: Tensor,
    pub c_d: Tensor,
    pub c_fu: Tensor,
}

fn same_shape3(a: &Tensor, b: &Tensor, c: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let d = a.dims4()?;
    if b.dims4()? != d || c.dims4()? != d {
        return Err(Error::Shape(format!(
            "fusion inputs must share a shape, got {:?}, {:?}, {:?}",
            a.dims(),
            b.dims(),
            c.dims()
        )));
    }
    Ok(d)
}

/// Position mutual attention: N x N maps from the spatially fused carrier
/// against each modality, refined features L2-normalized along positions.
pub fn pmf_attention(
    f_rgb: &Tensor,
    f_d: &Tensor,
    f_sp: &Tensor,
    cfg: &FusionConfig,
) -> Result<PmfAttention> {
    let (b, c, h, w) = same_shape3(f_rgb, f_d, f_sp)?;
    let n = h * w;
    if n > cfg.max_attention_pixels {
        return Err(Error::Config(format!(
            "position attention over {n} pixels exceeds fusion.max_attention_pixels = {}; \
             lower the fusion resolution or raise the cap",
            cfg.max_attention_pixels
        )));
    }
    let rgb = f_rgb.reshape((b, c, n))?;
    let d = f_d.reshape((b, c, n))?;
    let sp = f_sp.reshape((b, c, n))?;
    let sp_t = sp.transpose(1, 2)?.contiguous()?;
    let ms_rgb = ops::moment_normalize(&sp_t.matmul(&rgb)?, cfg.moment_exponent)?;
    let ms_d = ops::moment_normalize(&sp_t.matmul(&d)?, cfg.moment_exponent)?;
    let ms_fu = (&ms_rgb + &ms_d)?;
    let p_rgb = ops::l2_normalize(&rgb.matmul(&ms_rgb)?, 2, cfg.l2_power)?.reshape((b, c, h, w))?;
    let p_d = ops::l2_normalize(&d.matmul(&ms_d)?, 2, cfg.l2_power)?.reshape((b, c, h, w))?;
    let p_fu = ops::l2_normalize(&sp.matmul(&ms_fu)?, 2, cfg.l2_power)?.reshape((b, c, h, w))?;
    Ok(PmfAttention { ms_rgb, ms_d, ms_fu, p_rgb, p_d, p_fu })
}

/// Channel mutual attention: C x C maps from each modality against the
/// channel-fused carrier, refined features L2-normalized along channels.
pub fn cmf_attention(
    f_rgb: &Tensor,
    f_d: &Tensor,
    f_ch: &Tensor,
    cfg: &FusionConfig,
) -> Result<CmfAttention> {
    let (b, c, h, w) = same_shape3(f_rgb, f_d, f_ch)?;
    let n = h * w;
    let rgb = f_rgb.reshape((b, c, n))?;
    let d = f_d.reshape((b, c, n))?;
    let ch = f_ch.reshape((b, c, n))?;
    let ch_t = ch.transpose(1, 2)?.contiguous()?;
    let mc_rgb = ops::moment_normalize(&rgb.matmul(&ch_t)?, cfg.moment_exponent)?;
    let mc_d = ops::moment_normalize(&d.matmul(&ch_t)?, cfg.moment_exponent)?;
    let mc_fu = (&mc_rgb + &mc_d)?;
    let c_rgb = ops::l2_normalize(&mc_rgb.matmul(&rgb)?, 1, cfg.l2_power)?.reshape((b, c, h, w))?;
    let c_d = ops::l2_normalize(&mc_d.matmul(&d)?, 1, cfg.l2_power)?.reshape((b, c, h, w))?;
    let c_fu = ops::l2_normalize(&mc_fu.matmul(&ch)?, 1, cfg.l2_power)?.reshape((b, c, h, w))?;
    Ok(CmfAttention { mc_rgb, mc_d, mc_fu, c_rgb, c_d, c_fu })
}

/// Two-convolution channel reduction: 1x1 to the fusion width, then 3x3.
pub struct ChannelReduce {
    conv1: ConvBnRelu,
    conv3: ConvBnRelu,
}

impl ChannelReduce {
    pub fn new(ps: &ParamStore, cin: usize, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("fusion width must be positive".into()));
        }
        Ok(ChannelReduce {
            conv1: ConvBnRelu::new(&ps.sub("conv1"), cin, width, 1, 1)?,
            conv3: ConvBnRelu::new(&ps.sub("conv3"), width, width, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        self.conv3.forward(&self.conv1.forward(x, training)?, training)
    }
}

/// Spatial pre-fusion: elementwise sum, 7x7 spatial attention over pooled
/// channel statistics, gated residual and a 1x1 projection.
pub struct SpatialFuse {
    conv7: ConvBnRelu,
    out: ConvBnRelu,
}

impl SpatialFuse {
    pub fn new(ps: &ParamStore, width: usize) -> Result<Self> {
        Ok(SpatialFuse {
            conv7: ConvBnRelu::new(&ps.sub("conv7"), 2, 1, 7, 1)?,
            out: ConvBnRelu::new(&ps.sub("out"), width, width, 1, 1)?,
        })
    }

    pub fn forward(&self, f_rgb: &Tensor, f_d: &Tensor, training: bool) -> Result<Tensor> {
        if f_rgb.dims() != f_d.dims() {
            return Err(Error::Shape(format!(
                "spatial_fuse inputs differ: {:?} vs {:?}",
                f_rgb.dims(),
                f_d.dims()
            )));
        }
        let fa = (f_rgb + f_d)?;
        let pooled = Tensor::cat(&[ops::channel_max(&fa)?, ops::channel_avg(&fa)?], 1)?;
        let wsp = self.conv7.forward(&pooled, training)?;
        let gated = (fa.broadcast_mul(&wsp)? + &fa)?;
        self.out.forward(&gated, training)
    }
}

/// Channel pre-fusion: concatenation, shared two-layer bottleneck over the
/// global max and average pools, channel reweighting and a halving 1x1.
pub struct ChannelFuse {
    fc1: Linear,
    fc2: Linear,
    out: ConvBnRelu,
}

impl ChannelFuse {
    pub fn new(ps: &ParamStore, width: usize, reduction: usize) -> Result<Self> {
        let cat = 2 * width;
        let hidden = (cat / reduction).max(1);
        Ok(ChannelFuse {
            fc1: Linear::new(&ps.sub("fc1"), cat, hidden)?,
            fc2: Linear::new(&ps.sub("fc2"), hidden, cat)?,
            out: ConvBnRelu::new(&ps.sub("out"), cat, width, 1, 1)?,
        })
    }

    /// The shared bottleneck applied to one pooled (b, 2c) vector.
    pub fn bottleneck(&self, pooled: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(pooled)?.relu()?)
    }

    /// W^CH: sum of the bottleneck over the max- and average-pooled inputs.
    pub fn channel_weights(&self, f_cat: &Tensor) -> Result<Tensor> {
        let (b, c2, _, _) = f_cat.dims4()?;
        let wm = self.bottleneck(&ops::global_max_pool(f_cat)?)?;
        let wa = self.bottleneck(&ops::global_avg_pool(f_cat)?)?;
        Ok((wm + wa)?.reshape((b, c2, 1, 1))?)
    }

    pub fn forward(&self, f_rgb: &Tensor, f_d: &Tensor, training: bool) -> Result<Tensor> {
        if f_rgb.dims() != f_d.dims() {
            return Err(Error::Shape(format!(
                "channel_fuse inputs differ: {:?} vs {:?}",
                f_rgb.dims(),
                f_d.dims()
            )));
        }
        let f_cat = Tensor::cat(&[f_rgb, f_d], 1)?;
        let wch = self.channel_weights(&f_cat)?;
        let gated = f_cat.broadcast_mul(&wch)?;
        self.out.forward(&gated, training)
    }
}

/// Merge convolutions applied to the concatenated refined triple.
struct MergeConvs {
    conv1: ConvBnRelu,
    conv3: ConvBnRelu,
}

impl MergeConvs {
    fn new(ps: &ParamStore, width: usize) -> Result<Self> {
        Ok(MergeConvs {
            conv1: ConvBnRelu::new(&ps.sub("conv1"), 3 * width, width, 1, 1)?,
            conv3: ConvBnRelu::new(&ps.sub("conv3"), width, width, 3, 1)?,
        })
    }

    fn forward(&self, parts: [&Tensor; 3], training: bool) -> Result<Tensor> {
        let cat = Tensor::cat(&parts, 1)?;
        self.conv3.forward(&self.conv1.forward(&cat, training)?, training)
    }
}

/// Intermediate and final products of one fused stage.
pub struct FusedParts {
    pub pmf: Option<Tensor>,
    pub cmf: Option<Tensor>,
    pub fused: Tensor,
}

/// One stage of the dual mutual fusion module.
pub struct StageFusion {
    cfg: FusionConfig,
    width: usize,
    reduce_rgb: ChannelReduce,
    reduce_d: ChannelReduce,
    spatial: Option<SpatialFuse>,
    pmf_merge: Option<MergeConvs>,
    channel_fuse: Option<ChannelFuse>,
    cmf_merge: Option<MergeConvs>,
    concat_proj: Option<ConvBnRelu>,
}

const SE_REDUCTION: usize = 16;

impl StageFusion {
    pub fn new(ps: &ParamStore, cin: usize, width: usize, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let mode = cfg.mode;
        let needs_pmf = matches!(mode, FusionMode::Parallel | FusionMode::Serial | FusionMode::PmfOnly);
        let needs_cmf = matches!(mode, FusionMode::Parallel | FusionMode::Serial | FusionMode::CmfOnly);
        let needs_chfuse = matches!(mode, FusionMode::Parallel | FusionMode::CmfOnly);
        Ok(StageFusion {
            cfg: cfg.clone(),
            width,
            reduce_rgb: ChannelReduce::new(&ps.sub("reduce_rgb"), cin, width)?,
            reduce_d: ChannelReduce::new(&ps.sub("reduce_d"), cin, width)?,
            spatial: needs_pmf
                .then(|| SpatialFuse::new(&ps.sub("spatial"), width))
                .transpose()?,
            pmf_merge: needs_pmf
                .then(|| MergeConvs::new(&ps.sub("pmf"), width))
                .transpose()?,
            channel_fuse: needs_chfuse
                .then(|| ChannelFuse::new(&ps.sub("chfuse"), width, SE_REDUCTION))
                .transpose()?,
            cmf_merge: needs_cmf
                .then(|| MergeConvs::new(&ps.sub("cmf"), width))
                .transpose()?,
            concat_proj: matches!(mode, FusionMode::ConcatOnly)
                .then(|| ConvBnRelu::new(&ps.sub("concat_proj"), 2 * width, width, 1, 1))
                .transpose()?,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The spatial pre-fusion product f^SP for this stage.
    pub fn spatial_fuse(&self, f_rgb: &Tensor, f_d: &Tensor, training: bool) -> Result<Tensor> {
        self.spatial
            .as_ref()
            .expect("pmf path not built in this mode")
            .forward(f_rgb, f_d, training)
    }

    /// f^PMF from the reduced inputs and the spatial pre-fusion carrier:
    /// position attention followed by the merge convolutions.
    pub fn position_mutual_fusion(
        &self,
        f_rgb: &Tensor,
        f_d: &Tensor,
        f_sp: &Tensor,
        training: bool,
    ) -> Result<Tensor> {
        let merge = self.pmf_merge.as_ref().expect("pmf path not built in this mode");
        let att = pmf_attention(f_rgb, f_d, f_sp, &self.cfg)?;
        merge.forward([&att.p_rgb, &att.p_d, &att.p_fu], training)
    }

    /// f^CMF from reduced inputs and a fused carrier (f^CH in the parallel
    /// wiring, f^PMF in the serial wiring).
    pub fn channel_mutual_fusion(
        &self,
        f_rgb: &Tensor,
        f_d: &Tensor,
        carrier: &Tensor,
        training: bool,
    ) -> Result<Tensor> {
        let merge = self.cmf_merge.as_ref().expect("cmf path not built in this mode");
        let att = cmf_attention(f_rgb, f_d, carrier, &self.cfg)?;
        merge.forward([&att.c_rgb, &att.c_d, &att.c_fu], training)
    }

    pub fn forward_parts(
        &self,
        stage_rgb: &Tensor,
        stage_d: &Tensor,
        training: bool,
    ) -> Result<FusedParts> {
        let f_rgb = self.reduce_rgb.forward(stage_rgb, training)?;
        let f_d = self.reduce_d.forward(stage_d, training)?;
        match self.cfg.mode {
            FusionMode::Parallel => {
                let f_sp = self.spatial_fuse(&f_rgb, &f_d, training)?;
                let pmf = self.position_mutual_fusion(&f_rgb, &f_d, &f_sp, training)?;
                let fch = self
                    .channel_fuse
                    .as_ref()
                    .unwrap()
                    .forward(&f_rgb, &f_d, training)?;
                let cmf = self.channel_mutual_fusion(&f_rgb, &f_d, &fch, training)?;
                let fused = (&pmf + &cmf)?;
                Ok(FusedParts { pmf: Some(pmf), cmf: Some(cmf), fused })
            }
            FusionMode::Serial => {
                let f_sp = self.spatial_fuse(&f_rgb, &f_d, training)?;
                let pmf = self.position_mutual_fusion(&f_rgb, &f_d, &f_sp, training)?;
                let cmf = self.channel_mutual_fusion(&f_rgb, &f_d, &pmf, training)?;
                Ok(FusedParts { pmf: Some(pmf), cmf: Some(cmf.clone()), fused: cmf })
            }
            FusionMode::PmfOnly => {
                let f_sp = self.spatial_fuse(&f_rgb, &f_d, training)?;
                let pmf = self.position_mutual_fusion(&f_rgb, &f_d, &f_sp, training)?;
                Ok(FusedParts { pmf: Some(pmf.clone()), cmf: None, fused: pmf })
            }
            FusionMode::CmfOnly => {
                let fch = self
                    .channel_fuse
                    .as_ref()
                    .unwrap()
                    .forward(&f_rgb, &f_d, training)?;
                let cmf = self.channel_mutual_fusion(&f_rgb, &f_d, &fch, training)?;
                Ok(FusedParts { pmf: None, cmf: Some(cmf.clone()), fused: cmf })
            }
            FusionMode::ConcatOnly => {
                let cat = Tensor::cat(&[&f_rgb, &f_d], 1)?;
                let fused = self.concat_proj.as_ref().unwrap().forward(&cat, training)?;
                Ok(FusedParts { pmf: None, cmf: None, fused })
            }
        }
    }

    /// F^Fus for one stage.
    pub fn forward(&self, stage_rgb: &Tensor, stage_d: &Tensor, training: bool) -> Result<Tensor> {
        Ok(self.forward_parts(stage_rgb, stage_d, training)?.fused)
    }
}

/// All four fusion stages.
pub struct FusionModule {
    stages: Vec<StageFusion>,
}

impl FusionModule {
    pub fn new(ps: &ParamStore, in_channels: [usize; 4], cfg: &FusionConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            stages.push(StageFusion::new(
                &ps.sub(&format!("stage{}", i + 1)),
                in_channels[i],
                cfg.widths[i],
                cfg,
            )?);
        }
        Ok(FusionModule { stages })
    }

    pub fn stage(&self, i: usize) -> &StageFusion {
        &self.stages[i]
    }

    pub fn forward(
        &self,
        rgb_stages: &[Tensor; 4],
        d_stages: &[Tensor; 4],
        training: bool,
    ) -> Result<[Tensor; 4]> {
        let mut out = Vec::with_capacity(4);
        for i in 0..4 {
            out.push(self.stages[i].forward(&rgb_stages[i], &d_stages[i], training)?);
        }
        Ok([
            out.remove(0),
            out.remove(0),
            out.remove(0),
            out.remove(0),
        ])
    }
}
