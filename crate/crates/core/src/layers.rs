//! Reusable layers: plain/normalized convolutions, linear, batch and layer
//! norm, and the squeeze-excite channel attention block.

use candle_core::{Tensor, Var, D};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Init, ParamStore};

/// Plain convolution (optional bias, no normalization or activation).
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    pad: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(
        ps: &ParamStore,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = ps.trainable(
            "weight",
            &[cout, cin, k, k],
            Init::ScaledNormal { fan_in: cin * k * k },
        )?;
        let bias = if with_bias {
            Some(ps.trainable("bias", &[cout], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, pad: k / 2, stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(
            x,
            self.weight.as_tensor(),
            self.bias.as_ref().map(|b| b.as_tensor()),
            self.pad,
            self.stride,
        )
    }
}

/// Depthwise 3x3 convolution with bias (the PVTv2 feed-forward mixer).
pub struct DepthwiseConv2d {
    weight: Var,
    bias: Var,
}

impl DepthwiseConv2d {
    pub fn new(ps: &ParamStore, channels: usize, k: usize) -> Result<Self> {
        let weight = ps.trainable(
            "weight",
            &[channels, 1, k, k],
            Init::ScaledNormal { fan_in: k * k },
        )?;
        let bias = ps.trainable("bias", &[channels], Init::Const(0.0))?;
        Ok(DepthwiseConv2d { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d_depthwise(x, self.weight.as_tensor(), Some(self.bias.as_tensor()), 1)
    }
}

pub struct Linear {
    weight: Var, // (out, in)
    bias: Var,
}

impl Linear {
    pub fn new(ps: &ParamStore, inn: usize, out: usize) -> Result<Self> {
        let weight = ps.trainable("weight", &[out, inn], Init::ScaledNormal { fan_in: inn })?;
        let bias = ps.trainable("bias", &[out], Init::Const(0.0))?;
        Ok(Linear { weight, bias })
    }

    /// Applies to the last dimension of a (..., in) tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let wt = self.weight.as_tensor().t()?.contiguous()?;
        let y = x.broadcast_matmul(&wt)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over (N, H, W) per channel with running statistics.
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    pub fn new(ps: &ParamStore, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: ps.trainable("gamma", &[channels], Init::Const(1.0))?,
            beta: ps.trainable("beta", &[channels], Init::Const(0.0))?,
            running_mean: ps.buffer("running_mean", &[channels], 0.0)?,
            running_var: ps.buffer("running_var", &[channels], 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let gamma = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let beta = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        if training {
            let n = (b * h * w) as f64;
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            // Running stats track the unbiased variance, detached from the graph.
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (mean.detach().reshape(c)? * BN_MOMENTUM)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (var.detach().reshape(c)? * (BN_MOMENTUM * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            let norm = centered.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
            Ok(norm.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
        } else {
            let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
            let var = self.running_var.as_tensor().reshape((1, c, 1, 1))?;
            let norm = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
            Ok(norm.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
        }
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, dim: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            gamma: ps.trainable("gamma", &[dim], Init::Const(1.0))?,
            beta: ps.trainable("beta", &[dim], Init::Const(0.0))?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let norm = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(norm
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// `Conv_k` of the architecture's notation: k x k convolution + BN + ReLU.
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(ps: &ParamStore, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(&ps.sub("conv"), cin, cout, k, stride, false)?,
            bn: BatchNorm2d::new(&ps.sub("bn"), cout)?,
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, training)?.relu()?)
    }
}

/// Squeeze-excite channel attention: shared two-layer bottleneck applied to
/// global average and max pools, sigmoid gate, channelwise rescale.
pub struct SqueezeExcite {
    fc1: Linear,
    fc2: Linear,
}

impl SqueezeExcite {
    pub fn new(ps: &ParamStore, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::Config("squeeze-excite reduction must be > 0".into()));
        }
        let hidden = (channels / reduction).max(1);
        Ok(SqueezeExcite {
            fc1: Linear::new(&ps.sub("fc1"), channels, hidden)?,
            fc2: Linear::new(&ps.sub("fc2"), hidden, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let avg = ops::global_avg_pool(x)?;
        let max = ops::global_max_pool(x)?;
        let a = self.fc2.forward(&self.fc1.forward(&avg)?.relu()?)?;
        let m = self.fc2.forward(&self.fc1.forward(&max)?.relu()?)?;
        let gate = ops::sigmoid(&(a + m)?)?.reshape((b, c, 1, 1))?;
        Ok(x.broadcast_mul(&gate)?)
    }
}
