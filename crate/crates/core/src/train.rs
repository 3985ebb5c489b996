//! Training: Adam over the registered trainables, the staged freeze
//! schedule (CNN branches first, then the decoder transformers, then
//! everything free), per-epoch lr decay, loss-history CSV, checkpointing
//! and evaluation.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointData, EntryKind};
use crate::config::RunConfig;
use crate::data::{
    augment, epoch_order, load_raw, make_batch, prepare, sample_rng, Batch, PreparedSample,
    SampleRecord,
};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{evaluate_pair, DatasetAccumulator, GrayMap, MetricReport};
use crate::model::GlDmNet;
use crate::params::ParamKind;

/// Closed-form learning rate: lr0 * decay^epoch (0-based epochs).
pub fn lr_at(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeGroup {
    Cnn,
    Transformer,
    Rest,
}

pub fn freeze_group(name: &str) -> FreezeGroup {
    if name.starts_with("rgb_encoder.") || name.starts_with("depth_encoder.") {
        FreezeGroup::Cnn
    } else if name.starts_with("decoder.trans") {
        FreezeGroup::Transformer
    } else {
        FreezeGroup::Rest
    }
}

/// Phase schedule: CNN frozen for the first `cnn` epochs, transformers for
/// the following `transformer` epochs, everything free afterwards.
#[derive(Debug, Clone, Copy)]
pub struct FreezeSchedule {
    pub cnn_epochs: usize,
    pub transformer_epochs: usize,
}

impl FreezeSchedule {
    pub fn active(&self, name: &str, epoch: usize) -> bool {
        match freeze_group(name) {
            FreezeGroup::Cnn => epoch >= self.cnn_epochs,
            FreezeGroup::Transformer => {
                !(self.cnn_epochs..self.cnn_epochs + self.transformer_epochs).contains(&epoch)
            }
            FreezeGroup::Rest => true,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with per-parameter moments and step counts. Frozen parameters are
/// skipped entirely: no moment update, no step advance.
pub struct Adam {
    entries: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(trainables: Vec<(String, Var)>) -> Result<Self> {
        let mut m = Vec::with_capacity(trainables.len());
        let mut v = Vec::with_capacity(trainables.len());
        for (_, var) in &trainables {
            m.push(var.as_tensor().zeros_like()?);
            v.push(var.as_tensor().zeros_like()?);
        }
        let t = vec![0u64; trainables.len()];
        Ok(Adam { entries: trainables, m, v, t })
    }

    /// One update over every active parameter with a gradient. Returns the
    /// number of parameters updated.
    pub fn step<F: Fn(&str) -> bool>(
        &mut self,
        grads: &GradStore,
        lr: f64,
        grad_clip: f64,
        active: F,
    ) -> Result<usize> {
        // Optional global-norm clipping over the active gradients.
        let mut scale = 1.0;
        if grad_clip > 0.0 {
            let mut sq = 0f64;
            for (name, var) in &self.entries {
                if !active(name) {
                    continue;
                }
                if let Some(g) = grads.get(var.as_tensor()) {
                    sq += g
                        .sqr()?
                        .sum_all()?
                        .to_dtype(DType::F64)?
                        .to_scalar::<f64>()?;
                }
            }
            let norm = sq.sqrt();
            if norm > grad_clip {
                scale = grad_clip / norm;
            }
        }
        let mut updated = 0;
        for (i, (name, var)) in self.entries.iter().enumerate() {
            if !active(name) {
                continue;
            }
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            self.t[i] += 1;
            let t = self.t[i];
            self.m[i] = ((&self.m[i] * ADAM_BETA1)? + (&g * (1.0 - ADAM_BETA1))?)?;
            self.v[i] = ((&self.v[i] * ADAM_BETA2)? + (g.sqr()? * (1.0 - ADAM_BETA2))?)?;
            let m_hat = (&self.m[i] / (1.0 - ADAM_BETA1.powi(t as i32)))?;
            let v_hat = (&self.v[i] / (1.0 - ADAM_BETA2.powi(t as i32)))?;
            let delta = (m_hat * lr)?.div(&(v_hat.sqrt()? + ADAM_EPS)?)?;
            var.set(&(var.as_tensor() - delta)?.detach())?;
            updated += 1;
        }
        Ok(updated)
    }

    pub fn state_tensors(&self) -> Vec<(String, EntryKind, Tensor)> {
        let mut out = Vec::with_capacity(self.entries.len() * 2);
        for (i, (name, _)) in self.entries.iter().enumerate() {
            out.push((name.clone(), EntryKind::AdamM, self.m[i].clone()));
            out.push((name.clone(), EntryKind::AdamV, self.v[i].clone()));
        }
        out
    }

    pub fn step_counts(&self) -> Vec<(String, u64)> {
        self.entries
            .iter()
            .zip(&self.t)
            .map(|((n, _), &t)| (n.clone(), t))
            .collect()
    }

    pub fn load_state(
        &mut self,
        m: &std::collections::HashMap<String, Tensor>,
        v: &std::collections::HashMap<String, Tensor>,
        t: &std::collections::HashMap<String, u64>,
    ) -> Result<()> {
        for (i, (name, _)) in self.entries.iter().enumerate() {
            if let Some(mt) = m.get(name) {
                self.m[i] = mt.clone();
            }
            if let Some(vt) = v.get(name) {
                self.v[i] = vt.clone();
            }
            if let Some(tc) = t.get(name) {
                self.t[i] = *tc;
            }
        }
        Ok(())
    }
}

/// Serialize model + optimizer into a checkpoint structure.
pub fn checkpoint_data(
    model: &GlDmNet,
    adam: &Adam,
    cfg: &RunConfig,
    epoch: u64,
    global_step: u64,
) -> Result<CheckpointData> {
    let mut tensors = Vec::new();
    for (name, var, kind) in model.store().named() {
        let kind = match kind {
            ParamKind::Trainable => EntryKind::Param,
            ParamKind::Buffer => EntryKind::Buffer,
        };
        tensors.push((name, kind, var.as_tensor().copy()?));
    }
    tensors.extend(adam.state_tensors());
    Ok(CheckpointData {
        config_text: cfg.resolved(),
        config_hash: cfg.hash(),
        epoch,
        global_step,
        seed: cfg.train_seed,
        tensors,
        adam_steps: adam.step_counts(),
    })
}

/// Restore model + optimizer values from a loaded checkpoint.
pub fn apply_checkpoint(data: &CheckpointData, model: &GlDmNet, adam: &mut Adam) -> Result<()> {
    model.store().load_values(&data.model_values(), true)?;
    let m = data.tensor_map(EntryKind::AdamM);
    let v = data.tensor_map(EntryKind::AdamV);
    let t = data.adam_steps.iter().cloned().collect();
    adam.load_state(&m, &v, &t)
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub history_path: PathBuf,
    pub steps: usize,
    pub last_loss: f64,
}

fn history_header() -> String {
    "step,epoch,lr,bce1,bce2,bce3,bce4,iou1,iou2,iou3,iou4,total\n".to_string()
}

fn history_line(step: usize, epoch: usize, lr: f64, b: &LossBreakdown) -> String {
    format!(
        "{},{},{:.8e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        step,
        epoch,
        lr,
        b.per_level[0].0,
        b.per_level[1].0,
        b.per_level[2].0,
        b.per_level[3].0,
        b.per_level[0].1,
        b.per_level[1].1,
        b.per_level[2].1,
        b.per_level[3].1,
        b.total
    )
}

fn load_training_batch(
    records: &[SampleRecord],
    indices: &[usize],
    cfg: &RunConfig,
    epoch: usize,
    device: &Device,
) -> Result<Batch> {
    let mut samples: Vec<PreparedSample> = Vec::with_capacity(indices.len());
    let mut stems = Vec::with_capacity(indices.len());
    let aug_cfg = cfg.augment_config();
    for &idx in indices {
        let rec = &records[idx];
        let mut raw = load_raw(rec, cfg.data_image_size)?;
        if cfg.data_augment {
            let mut rng = sample_rng(cfg.train_seed, epoch, idx);
            augment(&mut raw, &aug_cfg, &mut rng);
        }
        samples.push(prepare(&raw));
        stems.push(rec.stem.clone());
    }
    make_batch(&samples, stems, device)
}

/// End-to-end training. Writes `history.csv`, periodic and final
/// checkpoints, and the resolved config into `run_dir`.
pub fn train(
    cfg: &RunConfig,
    records: &[SampleRecord],
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    if records.is_empty() {
        return Err(Error::Data("empty training manifest".into()));
    }
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join("config.resolved"), cfg.resolved())?;

    let device = Device::Cpu;
    let model = GlDmNet::new(cfg, &device, DType::F32)?;
    let mut adam = Adam::new(model.store().trainables())?;
    let mut start_epoch = 0usize;
    let mut global_step = 0usize;
    if let Some(ckpt_path) = resume {
        let data = load_checkpoint(ckpt_path, &device)?;
        if data.config_hash != cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "resume config hash mismatch: checkpoint {} vs current {}",
                data.config_hash,
                cfg.hash()
            )));
        }
        apply_checkpoint(&data, &model, &mut adam)?;
        start_epoch = data.epoch as usize;
        global_step = data.global_step as usize;
    }
    std::fs::write(
        run_dir.join("param_count.txt"),
        format!("{}\n", model.trainable_param_count()),
    )?;

    let schedule = FreezeSchedule {
        cnn_epochs: cfg.train_freeze_cnn_epochs,
        transformer_epochs: cfg.train_freeze_transformer_epochs,
    };
    let history_path = run_dir.join("history.csv");
    let mut history = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&history_path)?;
    if start_epoch == 0 {
        history.write_all(history_header().as_bytes())?;
    }

    let mut last_loss = f64::NAN;
    for epoch in start_epoch..cfg.train_epochs {
        let lr = lr_at(cfg.train_lr, cfg.train_lr_decay, epoch);
        let order = epoch_order(records.len(), cfg.train_seed, epoch);
        for chunk in order.chunks(cfg.train_batch_size) {
            let batch = load_training_batch(records, chunk, cfg, epoch, &device)?;
            let out = model.forward(&batch.rgb, &batch.depth, true)?;
            let (loss, breakdown) = total_loss(&out.logits, &batch.gt, &cfg.loss_config())?;
            if !breakdown.total.is_finite() {
                return Err(Error::Diverged {
                    step: global_step,
                    detail: format!("non-finite loss on batch [{}]", batch.stems.join(", ")),
                });
            }
            let grads = loss.backward()?;
            adam.step(&grads, lr, cfg.train_grad_clip, |name| schedule.active(name, epoch))?;
            history.write_all(history_line(global_step, epoch, lr, &breakdown).as_bytes())?;
            last_loss = breakdown.total;
            global_step += 1;
        }
        let completed = epoch + 1;
        if cfg.train_checkpoint_every > 0 && completed % cfg.train_checkpoint_every == 0 {
            let data = checkpoint_data(&model, &adam, cfg, completed as u64, global_step as u64)?;
            save_checkpoint(&run_dir.join(format!("checkpoint-{completed:04}.ckpt")), &data)?;
        }
        if cfg.train_eval_every > 0 && completed % cfg.train_eval_every == 0 {
            let report = evaluate_model(&model, records, cfg, &run_dir.join(format!("eval-{completed:04}")))?;
            report.write_report(&run_dir.join(format!("eval-{completed:04}.txt")))?;
        }
        history.flush()?;
    }
    let data = checkpoint_data(&model, &adam, cfg, cfg.train_epochs as u64, global_step as u64)?;
    let final_path = run_dir.join("checkpoint-final.ckpt");
    save_checkpoint(&final_path, &data)?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        history_path,
        steps: global_step,
        last_loss,
    })
}

pub struct SmokeOutcome {
    pub initial: f64,
    pub final_loss: f64,
    pub ratio: f64,
    pub trajectory: Vec<f64>,
    pub diverged_at: Option<usize>,
}

/// Overfit a tiny fixture for `steps` Adam updates at a constant lr with
/// every parameter free. A healthy build drives the loss down by an order
/// of magnitude; a flat or rising trajectory means broken gradient flow.
pub fn overfit_smoke(cfg: &RunConfig, records: &[SampleRecord], steps: usize) -> Result<SmokeOutcome> {
    if records.is_empty() {
        return Err(Error::Data("empty fixture".into()));
    }
    let device = Device::Cpu;
    let model = GlDmNet::new(cfg, &device, DType::F32)?;
    let mut adam = Adam::new(model.store().trainables())?;
    let indices: Vec<usize> = (0..records.len()).collect();
    let mut no_aug = cfg.clone();
    no_aug.data_augment = false;
    let batch = load_training_batch(records, &indices, &no_aug, 0, &device)?;
    let mut trajectory = Vec::with_capacity(steps);
    for step in 0..steps {
        let out = model.forward(&batch.rgb, &batch.depth, true)?;
        let (loss, breakdown) = total_loss(&out.logits, &batch.gt, &cfg.loss_config())?;
        if !breakdown.total.is_finite() {
            return Ok(SmokeOutcome {
                initial: trajectory.first().copied().unwrap_or(f64::NAN),
                final_loss: f64::NAN,
                ratio: f64::NAN,
                trajectory,
                diverged_at: Some(step),
            });
        }
        trajectory.push(breakdown.total);
        let grads = loss.backward()?;
        adam.step(&grads, cfg.train_lr, cfg.train_grad_clip, |_| true)?;
    }
    let initial = trajectory[0];
    let out = model.forward(&batch.rgb, &batch.depth, true)?;
    let (_, breakdown) = total_loss(&out.logits, &batch.gt, &cfg.loss_config())?;
    let final_loss = breakdown.total;
    Ok(SmokeOutcome {
        initial,
        final_loss,
        ratio: final_loss / initial,
        trajectory,
        diverged_at: None,
    })
}

/// Writes round(255 * S) as an 8-bit grayscale PNG.
pub fn write_map_u8(path: &Path, values: &[f32], h: usize, w: usize) -> Result<()> {
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Shape("map buffer does not match dimensions".into()))?;
    img.save(path)?;
    Ok(())
}

/// Run inference over a manifest, write S_1 maps at the original ground
/// truth resolution into `out_dir`, and score them.
pub fn evaluate_model(
    model: &GlDmNet,
    records: &[SampleRecord],
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<MetricReport> {
    std::fs::create_dir_all(out_dir)?;
    let device = Device::Cpu;
    let mut acc = DatasetAccumulator::new();
    for rec in records {
        let prepared = crate::data::preprocess(rec, cfg.data_image_size)?;
        let rgb = prepared.rgb.to_tensor(&device)?;
        let depth = prepared.depth.to_tensor(&device)?;
        let s1 = model.predict(&rgb, &depth)?;
        let (_, _, h, w) = s1.dims4()?;
        let values = s1.flatten_all()?.to_vec1::<f32>()?;
        let gt = GrayMap::from_file(&rec.gt_path)?.binarize(0.5);
        let map = crate::data::ImageBuf::new(1, h, w, values)?.resize_bilinear(gt.h, gt.w);
        write_map_u8(&out_dir.join(format!("{}.png", rec.stem)), &map.data, gt.h, gt.w)?;
        // Score from the written 8-bit file so the report reflects the
        // artifacts a consumer would read.
        let pred = GrayMap::from_file(&out_dir.join(format!("{}.png", rec.stem)))?.normalize_minmax();
        acc.add(&evaluate_pair(&pred, &gt)?);
    }
    acc.finish()
}

/// Load a checkpoint, rebuild its model and evaluate it over a manifest.
pub fn evaluate_checkpoint(
    ckpt_path: &Path,
    records: &[SampleRecord],
    out_dir: &Path,
) -> Result<(MetricReport, RunConfig)> {
    let device = Device::Cpu;
    let data = load_checkpoint(ckpt_path, &device)?;
    let cfg = RunConfig::from_resolved_text(&data.config_text)?;
    let model = GlDmNet::new(&cfg, &device, DType::F32)?;
    model.store().load_values(&data.model_values(), true)?;
    let report = evaluate_model(&model, records, &cfg, out_dir)?;
    Ok((report, cfg))
}

/// Rebuild a model from a checkpoint (for prediction and feature dumps).
pub fn model_from_checkpoint(ckpt_path: &Path) -> Result<(GlDmNet, RunConfig)> {
    let device = Device::Cpu;
    let data = load_checkpoint(ckpt_path, &device)?;
    let cfg = RunConfig::from_resolved_text(&data.config_text)?;
    let model = GlDmNet::new(&cfg, &device, DType::F32)?;
    model.store().load_values(&data.model_values(), true)?;
    Ok((model, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_closed_form() {
        let lr = lr_at(1e-4, 0.97, 20);
        assert!((lr - 1e-4 * 0.97f64.powi(20)).abs() < 1e-18);
        assert!((lr - 5.4379e-5).abs() < 1e-8);
        assert_eq!(lr_at(1e-4, 0.97, 0), 1e-4);
    }

    #[test]
    fn freeze_groups_by_name() {
        assert_eq!(freeze_group("rgb_encoder.stem.conv.weight"), FreezeGroup::Cnn);
        assert_eq!(freeze_group("depth_encoder.layer1.0.bn1.gamma"), FreezeGroup::Cnn);
        assert_eq!(freeze_group("decoder.trans2.block0.attn.q.weight"), FreezeGroup::Transformer);
        assert_eq!(freeze_group("decoder.refine1.conv1.conv.weight"), FreezeGroup::Rest);
        assert_eq!(freeze_group("fusion.stage1.pmf.conv1.conv.weight"), FreezeGroup::Rest);
    }

    #[test]
    fn schedule_phases() {
        let s = FreezeSchedule { cnn_epochs: 3, transformer_epochs: 3 };
        // phase 1: cnn frozen
        assert!(!s.active("rgb_encoder.x", 0));
        assert!(s.active("decoder.trans1.x", 0));
        assert!(s.active("fusion.x", 0));
        // phase 2: transformer frozen
        assert!(s.active("rgb_encoder.x", 3));
        assert!(!s.active("decoder.trans1.x", 4));
        // phase 3: all free
        assert!(s.active("rgb_encoder.x", 6));
        assert!(s.active("decoder.trans1.x", 6));
    }

    #[test]
    fn adam_moves_only_active_params() -> Result<()> {
        let dev = Device::Cpu;
        let a = Var::from_tensor(&Tensor::ones((2, 2), DType::F32, &dev)?)?;
        let b = Var::from_tensor(&Tensor::ones((2, 2), DType::F32, &dev)?)?;
        let mut adam = Adam::new(vec![
            ("group_a.w".into(), a.clone()),
            ("group_b.w".into(), b.clone()),
        ])?;
        let loss = (a.as_tensor().sqr()?.sum_all()? + b.as_tensor().sqr()?.sum_all()?)?;
        let grads = loss.backward()?;
        let updated = adam.step(&grads, 0.1, 0.0, |n| n.starts_with("group_a"))?;
        assert_eq!(updated, 1);
        let av = a.as_tensor().flatten_all()?.to_vec1::<f32>()?;
        let bv = b.as_tensor().flatten_all()?.to_vec1::<f32>()?;
        assert!(av.iter().all(|&v| v < 1.0));
        assert!(bv.iter().all(|&v| v == 1.0));
        Ok(())
    }

    #[test]
    fn zero_lr_keeps_params() -> Result<()> {
        let dev = Device::Cpu;
        let a = Var::from_tensor(&Tensor::ones((2, 2), DType::F32, &dev)?)?;
        let mut adam = Adam::new(vec![("w".into(), a.clone())])?;
        let loss = a.as_tensor().sqr()?.sum_all()?;
        let grads = loss.backward()?;
        adam.step(&grads, 0.0, 0.0, |_| true)?;
        let av = a.as_tensor().flatten_all()?.to_vec1::<f32>()?;
        assert!(av.iter().all(|&v| v == 1.0));
        Ok(())
    }
}
