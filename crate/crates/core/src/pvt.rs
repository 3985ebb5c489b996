//! Resolution-preserving pyramid transformer stages.
//!
//! Each decoder stage wraps one transformer stage with the published B2
//! profile (depths, heads, mlp ratios, spatial-reduction ratios). Unlike the
//! classification backbone, the patch embedding here runs at stride 1 (3x3,
//! padding 1, overlapping) so the output resolution equals the input
//! resolution. The v1 variant swaps in a non-overlapping 1x1 embedding and a
//! plain feed-forward (no depthwise mixer).

use std::str::FromStr;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::layers::{Conv2d, DepthwiseConv2d, LayerNorm, Linear};
use crate::ops;
use crate::params::ParamStore;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformerVariant {
    PvtV2,
    PvtV1,
}

impl FromStr for TransformerVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pvtv2" => Ok(TransformerVariant::PvtV2),
            "pvtv1" => Ok(TransformerVariant::PvtV1),
            other => Err(Error::Config(format!(
                "unknown transformer variant '{other}' (expected pvtv2|pvtv1|off)"
            ))),
        }
    }
}

/// Published B2 per-stage profile.
#[derive(Debug, Clone, Copy)]
pub struct StageProfile {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub sr_ratio: usize,
}

pub const B2_PROFILE: [StageProfile; 4] = [
    StageProfile { dim: 64, depth: 3, heads: 1, mlp_ratio: 8, sr_ratio: 8 },
    StageProfile { dim: 128, depth: 4, heads: 2, mlp_ratio: 8, sr_ratio: 4 },
    StageProfile { dim: 320, depth: 6, heads: 5, mlp_ratio: 4, sr_ratio: 2 },
    StageProfile { dim: 512, depth: 3, heads: 8, mlp_ratio: 4, sr_ratio: 1 },
];

struct PatchEmbed {
    proj: Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn new(ps: &ParamStore, dim: usize, variant: TransformerVariant) -> Result<Self> {
        let k = match variant {
            TransformerVariant::PvtV2 => 3,
            TransformerVariant::PvtV1 => 1,
        };
        Ok(PatchEmbed {
            proj: Conv2d::new(&ps.sub("proj"), dim, dim, k, 1, true)?,
            norm: LayerNorm::new(&ps.sub("norm"), dim, LN_EPS)?,
        })
    }

    /// (b, c, h, w) -> tokens (b, h*w, c)
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.proj.forward(x)?;
        let (b, c, h, w) = y.dims4()?;
        let tokens = y.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        self.norm.forward(&tokens)
    }
}

/// Multi-head self attention with optional spatial reduction of keys/values.
struct Attention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    sr: Option<(Conv2d, LayerNorm)>,
    heads: usize,
    dim: usize,
    sr_ratio: usize,
}

impl Attention {
    fn new(ps: &ParamStore, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let sr = if sr_ratio > 1 {
            Some((
                Conv2d::new(&ps.sub("sr"), dim, dim, sr_ratio, sr_ratio, true)?,
                LayerNorm::new(&ps.sub("sr_norm"), dim, LN_EPS)?,
            ))
        } else {
            None
        };
        Ok(Attention {
            q: Linear::new(&ps.sub("q"), dim, dim)?,
            kv: Linear::new(&ps.sub("kv"), dim, 2 * dim)?,
            proj: Linear::new(&ps.sub("proj"), dim, dim)?,
            sr,
            heads,
            dim,
            sr_ratio,
        })
    }

    fn forward(&self, tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = tokens.dims3()?;
        let hd = self.dim / self.heads;
        let q = self
            .q
            .forward(tokens)?
            .reshape((b, n, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let kv_src = match &self.sr {
            Some((conv, norm)) => {
                if h % self.sr_ratio != 0 || w % self.sr_ratio != 0 {
                    return Err(Error::Shape(format!(
                        "spatial size {h}x{w} not divisible by sr ratio {}",
                        self.sr_ratio
                    )));
                }
                let grid = tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
                let red = conv.forward(&grid)?;
                let (_, _, rh, rw) = red.dims4()?;
                let red = red.reshape((b, c, rh * rw))?.transpose(1, 2)?.contiguous()?;
                norm.forward(&red)?
            }
            None => tokens.clone(),
        };
        let m = kv_src.dims3()?.1;
        let kv = self
            .kv
            .forward(&kv_src)?
            .reshape((b, m, 2, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let k = kv.narrow(0, 0, 1)?.squeeze(0)?;
        let v = kv.narrow(0, 1, 1)?.squeeze(0)?;
        let scale = (hd as f64).powf(-0.5);
        let attn = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let attn = ops::softmax_last(&attn)?;
        let y = attn.matmul(&v)?; // (b, heads, n, hd)
        let y = y.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        self.proj.forward(&y)
    }
}

struct Mlp {
    fc1: Linear,
    dw: Option<DepthwiseConv2d>,
    fc2: Linear,
}

impl Mlp {
    fn new(ps: &ParamStore, dim: usize, ratio: usize, variant: TransformerVariant) -> Result<Self> {
        let hidden = dim * ratio;
        let dw = match variant {
            TransformerVariant::PvtV2 => Some(DepthwiseConv2d::new(&ps.sub("dwconv"), hidden, 3)?),
            TransformerVariant::PvtV1 => None,
        };
        Ok(Mlp {
            fc1: Linear::new(&ps.sub("fc1"), dim, hidden)?,
            dw,
            fc2: Linear::new(&ps.sub("fc2"), hidden, dim)?,
        })
    }

    fn forward(&self, tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = self.fc1.forward(tokens)?;
        let y = match &self.dw {
            Some(dw) => {
                let (b, n, hid) = y.dims3()?;
                debug_assert_eq!(n, h * w);
                let grid = y.transpose(1, 2)?.contiguous()?.reshape((b, hid, h, w))?;
                let mixed = dw.forward(&grid)?;
                mixed.reshape((b, hid, h * w))?.transpose(1, 2)?.contiguous()?
            }
            None => y,
        };
        let y = y.gelu_erf()?;
        self.fc2.forward(&y)
    }
}

struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = (tokens + self.attn.forward(&self.norm1.forward(tokens)?, h, w)?)?;
        let y2 = (&y + self.mlp.forward(&self.norm2.forward(&y)?, h, w)?)?;
        Ok(y2)
    }
}

/// One transformer stage: Trans_i of the decoder. Output spatial size equals
/// input spatial size for every stage.
pub struct TransformerStage {
    embed: PatchEmbed,
    blocks: Vec<Block>,
    norm: LayerNorm,
    profile: StageProfile,
}

impl TransformerStage {
    pub fn new(ps: &ParamStore, profile: StageProfile, variant: TransformerVariant) -> Result<Self> {
        let embed = PatchEmbed::new(&ps.sub("embed"), profile.dim, variant)?;
        let mut blocks = Vec::with_capacity(profile.depth);
        for bi in 0..profile.depth {
            let scope = ps.sub(&format!("block{bi}"));
            blocks.push(Block {
                norm1: LayerNorm::new(&scope.sub("norm1"), profile.dim, LN_EPS)?,
                attn: Attention::new(&scope.sub("attn"), profile.dim, profile.heads, profile.sr_ratio)?,
                norm2: LayerNorm::new(&scope.sub("norm2"), profile.dim, LN_EPS)?,
                mlp: Mlp::new(&scope.sub("mlp"), profile.dim, profile.mlp_ratio, variant)?,
            });
        }
        let norm = LayerNorm::new(&ps.sub("norm"), profile.dim, LN_EPS)?;
        Ok(TransformerStage { embed, blocks, norm, profile })
    }

    pub fn dim(&self) -> usize {
        self.profile.dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.profile.dim {
            return Err(Error::Shape(format!(
                "transformer stage expects {} channels, got {c}",
                self.profile.dim
            )));
        }
        let mut tokens = self.embed.forward(x)?;
        for blk in &self.blocks {
            tokens = blk.forward(&tokens, h, w)?;
        }
        let tokens = self.norm.forward(&tokens)?;
        Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
    }
}
