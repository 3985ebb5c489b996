//! Run configuration: defaults <- config file <- command-line overrides.
//!
//! The format is a flat dotted-key text file (`fusion.mode = parallel`, one
//! key per line, `#` comments). Unknown keys and malformed values are
//! rejected all at once. The fully resolved configuration renders to a
//! canonical sorted block whose SHA-256 is the config hash stored in
//! checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backbones::EncoderConfig;
use crate::data::AugmentConfig;
use crate::decoder::{DecoderConfig, TransformerKind};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode};
use crate::losses::{LossConfig, LossVariant};
use crate::pvt::B2_PROFILE;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub encoder_family: String,
    pub encoder_weights: Option<PathBuf>,

    pub fusion_mode: FusionMode,
    pub fusion_widths: [usize; 4],
    pub fusion_max_attention_pixels: usize,
    pub fusion_moment_exponent: f64,
    pub fusion_l2_power: u8,

    pub decoder_transformer: TransformerKind,
    pub decoder_reconstruction: bool,

    pub loss_variant: LossVariant,
    pub loss_lambdas: [f64; 4],

    pub data_root: Option<PathBuf>,
    pub data_image_size: usize,
    pub data_augment: bool,
    pub data_flip_prob: f64,
    pub data_rotation_degrees: f64,
    pub data_crop_scale_min: f64,
    pub data_jitter: f64,

    pub train_epochs: usize,
    pub train_batch_size: usize,
    pub train_lr: f64,
    pub train_lr_decay: f64,
    pub train_freeze_cnn_epochs: usize,
    pub train_freeze_transformer_epochs: usize,
    pub train_seed: u64,
    pub train_checkpoint_every: usize,
    pub train_eval_every: usize,
    pub train_grad_clip: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder_family: "resnet50".into(),
            encoder_weights: None,
            fusion_mode: FusionMode::Parallel,
            fusion_widths: [64, 128, 320, 512],
            fusion_max_attention_pixels: 4096,
            fusion_moment_exponent: -0.5,
            fusion_l2_power: 2,
            decoder_transformer: TransformerKind::PvtV2,
            decoder_reconstruction: true,
            loss_variant: LossVariant::BceIou,
            loss_lambdas: [0.8, 0.6, 0.4, 0.2],
            data_root: None,
            data_image_size: 256,
            data_augment: true,
            data_flip_prob: 0.5,
            data_rotation_degrees: 15.0,
            data_crop_scale_min: 0.9,
            data_jitter: 0.1,
            train_epochs: 200,
            train_batch_size: 4,
            train_lr: 1e-4,
            train_lr_decay: 0.97,
            train_freeze_cnn_epochs: 30,
            train_freeze_transformer_epochs: 30,
            train_seed: 42,
            train_checkpoint_every: 10,
            train_eval_every: 0,
            train_grad_clip: 0.0,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on|off, got '{v}'")),
    }
}

fn parse_list4<T: std::str::FromStr>(v: &str) -> std::result::Result<[T; 4], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected 4 comma-separated values, got {}", parts.len()));
    }
    let mut out = Vec::with_capacity(4);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("cannot parse '{p}'"))?);
    }
    out.try_into().map_err(|_| "length".to_string())
}

impl RunConfig {
    fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "encoder.family" => self.encoder_family = v.to_string(),
            "encoder.weights" => {
                self.encoder_weights = if v == "none" || v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "fusion.mode" => self.fusion_mode = v.parse().map_err(|e: Error| e.to_string())?,
            "fusion.widths" => self.fusion_widths = parse_list4(v)?,
            "fusion.max_attention_pixels" => {
                self.fusion_max_attention_pixels = v.parse().map_err(|_| "expected integer".to_string())?
            }
            "fusion.moment_exponent" => {
                self.fusion_moment_exponent = v.parse().map_err(|_| "expected number".to_string())?
            }
            "fusion.l2_power" => self.fusion_l2_power = v.parse().map_err(|_| "expected 1 or 2".to_string())?,
            "decoder.transformer" => {
                self.decoder_transformer = v.parse().map_err(|e: Error| e.to_string())?
            }
            "decoder.reconstruction" => self.decoder_reconstruction = parse_bool(v)?,
            "loss.variant" => self.loss_variant = v.parse().map_err(|e: Error| e.to_string())?,
            "loss.lambdas" => self.loss_lambdas = parse_list4(v)?,
            "data.root" => self.data_root = Some(PathBuf::from(v)),
            "data.image_size" => {
                self.data_image_size = v.parse().map_err(|_| "expected integer".to_string())?
            }
            "data.augment" => self.data_augment = parse_bool(v)?,
            "data.flip_prob" => self.data_flip_prob = v.parse().map_err(|_| "expected number".to_string())?,
            "data.rotation_degrees" => {
                self.data_rotation_degrees = v.parse().map_err(|_| "expected number".to_string())?
            }
            "data.crop_scale_min" => {
                self.data_crop_scale_min = v.parse().map_err(|_| "expected number".to_string())?
            }
            "data.jitter" => self.data_jitter = v.parse().map_err(|_| "expected number".to_string())?,
            "train.epochs" => self.train_epochs = v.parse().map_err(|_| "expected integer".to_string())?,
            "train.batch_size" => {
                self.train_batch_size = v.parse().map_err(|_| "expected integer".to_string())?
            }
            "train.lr" => self.train_lr = v.parse().map_err(|_| "expected number".to_string())?,
            "train.lr_decay" => self.train_lr_decay = v.parse().map_err(|_| "expected number".to_string())?,
            "train.freeze_cnn_epochs" => {
                self.train_freeze_cnn_epochs = v.parse().map_err(|_| "expected integer".to_string())?
            }
            "train.freeze_transformer_epochs" => {
                self.train_freeze_transformer_epochs =
                    v.parse().map_err(|_| "expected integer".to_string())?
            }
            "train.seed" => self.train_seed = v.parse().map_err(|_| "expected integer".to_string())?,
            "train.checkpoint_every" => {
                self.train_checkpoint_every = v.parse().map_err(|_| "expected integer".to_string())?
            }
            "train.eval_every" => {
                self.train_eval_every = v.parse().map_err(|_| "expected integer".to_string())?
            }
            "train.grad_clip" => {
                self.train_grad_clip = v.parse().map_err(|_| "expected number".to_string())?
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Apply `key = value` lines; collects every problem instead of
    /// stopping at the first.
    pub fn apply_lines<'a>(&mut self, lines: impl Iterator<Item = &'a str>) -> Result<()> {
        let mut problems = Vec::new();
        for (ln, raw) in lines.enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set_key(k.trim(), v) {
                        problems.push(format!("line {}: {}", ln + 1, e));
                    }
                }
                None => problems.push(format!("line {}: expected 'key = value'", ln + 1)),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_lines(text.lines())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_resolved_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_lines(text.lines())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `--set key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut problems = Vec::new();
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set_key(k.trim(), v) {
                        problems.push(e);
                    }
                }
                None => problems.push(format!("override '{o}' is not key=value")),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.data_image_size < 32 || self.data_image_size % 32 != 0 {
            problems.push(format!(
                "data.image_size must be a positive multiple of 32, got {}",
                self.data_image_size
            ));
        }
        if self.train_batch_size == 0 {
            problems.push("train.batch_size must be positive".into());
        }
        if self.train_epochs == 0 {
            problems.push("train.epochs must be positive".into());
        }
        if self.train_lr <= 0.0 {
            problems.push("train.lr must be positive".into());
        }
        if !(self.train_lr_decay > 0.0 && self.train_lr_decay <= 1.0) {
            problems.push("train.lr_decay must be in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.data_flip_prob) {
            problems.push("data.flip_prob must be in [0, 1]".into());
        }
        if !(self.data_crop_scale_min > 0.0 && self.data_crop_scale_min <= 1.0) {
            problems.push("data.crop_scale_min must be in (0, 1]".into());
        }
        if self.data_rotation_degrees < 0.0 {
            problems.push("data.rotation_degrees must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.data_jitter) {
            problems.push("data.jitter must be in [0, 1)".into());
        }
        if let Err(e) = self.fusion_config().validate() {
            problems.push(e.to_string());
        }
        for (i, (&w, p)) in self.fusion_widths.iter().zip(B2_PROFILE.iter()).enumerate() {
            if self.decoder_transformer != TransformerKind::Off && w % p.heads != 0 {
                problems.push(format!(
                    "fusion.widths[{i}] = {w} is not divisible by the stage's {} attention heads",
                    p.heads
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Canonical sorted key-value block; parsing it back reproduces the
    /// config exactly.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let kv: Vec<(String, String)> = vec![
            ("encoder.family".into(), self.encoder_family.clone()),
            (
                "encoder.weights".into(),
                self.encoder_weights
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into()),
            ),
            ("fusion.mode".into(), self.fusion_mode.as_str().into()),
            (
                "fusion.widths".into(),
                self.fusion_widths.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("fusion.max_attention_pixels".into(), self.fusion_max_attention_pixels.to_string()),
            ("fusion.moment_exponent".into(), format!("{}", self.fusion_moment_exponent)),
            ("fusion.l2_power".into(), self.fusion_l2_power.to_string()),
            ("decoder.transformer".into(), self.decoder_transformer.as_str().into()),
            (
                "decoder.reconstruction".into(),
                if self.decoder_reconstruction { "on" } else { "off" }.into(),
            ),
            (
                "loss.variant".into(),
                match self.loss_variant {
                    LossVariant::BceIou => "bce+iou",
                    LossVariant::Bce => "bce",
                    LossVariant::BceDice => "bce+dice",
                    LossVariant::BceSsim => "bce+ssim",
                }
                .into(),
            ),
            (
                "loss.lambdas".into(),
                self.loss_lambdas.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","),
            ),
            (
                "data.root".into(),
                self.data_root
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "".into()),
            ),
            ("data.image_size".into(), self.data_image_size.to_string()),
            ("data.augment".into(), if self.data_augment { "on" } else { "off" }.into()),
            ("data.flip_prob".into(), format!("{}", self.data_flip_prob)),
            ("data.rotation_degrees".into(), format!("{}", self.data_rotation_degrees)),
            ("data.crop_scale_min".into(), format!("{}", self.data_crop_scale_min)),
            ("data.jitter".into(), format!("{}", self.data_jitter)),
            ("train.epochs".into(), self.train_epochs.to_string()),
            ("train.batch_size".into(), self.train_batch_size.to_string()),
            ("train.lr".into(), format!("{}", self.train_lr)),
            ("train.lr_decay".into(), format!("{}", self.train_lr_decay)),
            ("train.freeze_cnn_epochs".into(), self.train_freeze_cnn_epochs.to_string()),
            (
                "train.freeze_transformer_epochs".into(),
                self.train_freeze_transformer_epochs.to_string(),
            ),
            ("train.seed".into(), self.train_seed.to_string()),
            ("train.checkpoint_every".into(), self.train_checkpoint_every.to_string()),
            ("train.eval_every".into(), self.train_eval_every.to_string()),
            ("train.grad_clip".into(), format!("{}", self.train_grad_clip)),
        ];
        let mut kv = kv
            .into_iter()
            .filter(|(k, v)| !(k == "data.root" && v.is_empty()))
            .collect::<Vec<_>>();
        kv.sort();
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.resolved().as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            mode: self.fusion_mode,
            widths: self.fusion_widths,
            max_attention_pixels: self.fusion_max_attention_pixels,
            moment_exponent: self.fusion_moment_exponent,
            l2_power: self.fusion_l2_power,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            transformer: self.decoder_transformer,
            reconstruction: self.decoder_reconstruction,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { variant: self.loss_variant, lambdas: self.loss_lambdas }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            family: self.encoder_family.clone(),
            weights: self.encoder_weights.clone(),
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            enabled: self.data_augment,
            flip_prob: self.data_flip_prob,
            rotation_degrees: self.data_rotation_degrees,
            crop_scale_min: self.data_crop_scale_min,
            jitter: self.data_jitter,
        }
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}
