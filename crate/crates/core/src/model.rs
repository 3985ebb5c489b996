//! Full network assembly: dual encoders -> per-stage dual mutual fusion ->
//! cascade transformer-infused reconstruction decoder -> four saliency maps.

use candle_core::{DType, Device, Tensor};

use crate::backbones::{extract_stages, make_dual_encoder, Encoder, ResNet50};
use crate::config::RunConfig;
use crate::decoder::{Decoder, SaliencyLogits};
use crate::error::{Error, Result};
use crate::fusion::FusionModule;
use crate::params::ParamStore;

pub struct GlDmNet {
    store: ParamStore,
    rgb_encoder: ResNet50,
    depth_encoder: ResNet50,
    fusion: FusionModule,
    decoder: Decoder,
}

impl GlDmNet {
    /// Builds the network from a run configuration with deterministic
    /// seed-derived initialization (optionally loading encoder weights).
    pub fn new(cfg: &RunConfig, device: &Device, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(device.clone(), dtype, cfg.train_seed);
        let (rgb_encoder, depth_encoder) = make_dual_encoder(&store, &cfg.encoder_config())?;
        let in_channels = rgb_encoder.stage_channels();
        let fusion = FusionModule::new(&store.sub("fusion"), in_channels, &cfg.fusion_config())?;
        let decoder = Decoder::new(
            &store.sub("decoder"),
            cfg.fusion_config().widths,
            &cfg.decoder_config(),
        )?;
        Ok(GlDmNet { store, rgb_encoder, depth_encoder, fusion, decoder })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn fusion(&self) -> &FusionModule {
        &self.fusion
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn check_inputs(rgb: &Tensor, depth: &Tensor) -> Result<(usize, usize)> {
        let (b, c, h, w) = rgb.dims4()?;
        let (bd, cd, hd, wd) = depth.dims4()?;
        if (b, h, w) != (bd, hd, wd) || c != 3 || cd != 3 {
            return Err(Error::Shape(format!(
                "rgb {:?} and depth {:?} must both be (b, 3, h, w) with matching sizes",
                rgb.dims(),
                depth.dims()
            )));
        }
        Ok((h, w))
    }

    /// Stage features of both branches.
    pub fn encode(
        &self,
        rgb: &Tensor,
        depth: &Tensor,
        training: bool,
    ) -> Result<([Tensor; 4], [Tensor; 4])> {
        Self::check_inputs(rgb, depth)?;
        let rgb_feats = extract_stages(&self.rgb_encoder, rgb, training)?;
        let depth_feats = extract_stages(&self.depth_encoder, depth, training)?;
        Ok((rgb_feats.stages, depth_feats.stages))
    }

    /// Fused stage features F^Fus_1..4.
    pub fn fuse(
        &self,
        rgb_stages: &[Tensor; 4],
        depth_stages: &[Tensor; 4],
        training: bool,
    ) -> Result<[Tensor; 4]> {
        self.fusion.forward(rgb_stages, depth_stages, training)
    }

    /// Full forward pass to four logit maps at the input resolution.
    pub fn forward(&self, rgb: &Tensor, depth: &Tensor, training: bool) -> Result<SaliencyLogits> {
        let (h, w) = Self::check_inputs(rgb, depth)?;
        let (rgb_stages, depth_stages) = self.encode(rgb, depth, training)?;
        let fused = self.fuse(&rgb_stages, &depth_stages, training)?;
        self.decoder.forward(&fused, (h, w), training)
    }

    /// Inference: the final saliency map S_1 only, in [0, 1], eval-mode
    /// normalization statistics, no autodiff graph retained.
    pub fn predict(&self, rgb: &Tensor, depth: &Tensor) -> Result<Tensor> {
        let out = self.forward(rgb, depth, false)?;
        Ok(out.final_map()?.detach())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data_image_size = 32;
        cfg.train_seed = 777;
        cfg
    }

    #[test]
    fn forward_shape_and_range_at_minimum_size() -> Result<()> {
        let cfg = tiny_cfg();
        let model = GlDmNet::new(&cfg, &Device::Cpu, DType::F32)?;
        let rgb = Tensor::randn(0f32, 1f32, (1, 3, 32, 32), &Device::Cpu)?;
        let depth = Tensor::randn(0f32, 1f32, (1, 3, 32, 32), &Device::Cpu)?;
        let out = model.forward(&rgb, &depth, false)?;
        for l in &out.logits {
            assert_eq!(l.dims(), &[1, 1, 32, 32]);
        }
        let s1 = model.predict(&rgb, &depth)?;
        let mx = s1.flatten_all()?.max(0)?.to_scalar::<f32>()?;
        let mn = s1.flatten_all()?.min(0)?.to_scalar::<f32>()?;
        assert!(mn >= 0.0 && mx <= 1.0);
        Ok(())
    }

    #[test]
    fn mismatched_inputs_rejected() -> Result<()> {
        let cfg = tiny_cfg();
        let model = GlDmNet::new(&cfg, &Device::Cpu, DType::F32)?;
        let rgb = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu)?;
        let depth = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu)?;
        assert!(model.forward(&rgb, &depth, false).is_err());
        Ok(())
    }
}
