//! Base and incremental training loops, the combined loss schedule and
//! decoder-only evaluation.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::image::{image_batch, RgbImage};
use crate::loc_prior::{OldModelOutput, PriorVariant};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::model::{FrozenModel, ModelConfig, Segmenter};
use crate::ops;
use crate::optim::{poly_lr, Sgd};
use crate::pamr;
use crate::pooling::{classification_loss_with, softmax_normalize, ClassTargets, ClsHyper, LabelScope, NormalizedMap, ScoreMap};
use crate::pseudo;
use crate::taxonomy::{derive_weak_labels, ClassId, IncrementalSchedule, SampleRecord};
use crate::train_log::{LogRow, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Encoder learning rate.
    pub base_lr: f64,
    /// Decoder and localizer learning rate.
    pub head_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub warmup_epochs: usize,
    pub alpha: f64,
    pub lambda_focal: f64,
    pub gamma_focal: f64,
    /// Weights of the image-level, prior, feature and self-supervised terms.
    pub loss_weights: [f64; 4],
    pub supervision: LabelScope,
    pub prior: PriorVariant,
    pub pamr_iterations: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 24,
            base_lr: 0.001,
            head_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            warmup_epochs: 5,
            alpha: 0.5,
            lambda_focal: 0.01,
            gamma_focal: 3.0,
            loss_weights: [1.0; 4],
            supervision: LabelScope::NewOnly,
            prior: PriorVariant::Loc,
            pamr_iterations: pamr::DEFAULT_ITERATIONS,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("head_lr", self.head_lr),
            ("poly_power", self.poly_power),
            ("lambda_focal", self.lambda_focal),
            ("gamma_focal", self.gamma_focal),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [("momentum", self.momentum), ("weight_decay", self.weight_decay)];
        for (name, v) in non_negative.into_iter().chain(self.loss_weights.iter().map(|w| ("loss_weights", *w))) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        let m = &self.model;
        if m.encoder_widths.contains(&0) || m.decoder_width == 0 || m.localizer_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        self.prior.validate(self.supervision)
    }

    fn hyper(&self) -> ClsHyper {
        ClsHyper {
            lambda: self.lambda_focal,
            gamma: self.gamma_focal,
            ..ClsHyper::default()
        }
    }

    pub fn in_warmup(&self, epoch: usize) -> bool {
        epoch <= self.warmup_epochs
    }

    /// Coefficient of each loss term at a 1-based epoch.
    pub fn coefficients(&self, epoch: usize) -> LossParts<f64> {
        let [l1, l2, l3, l4] = self.loss_weights;
        let after = if self.in_warmup(epoch) { 0.0 } else { 1.0 };
        LossParts {
            cls: l1,
            loc: l2,
            enc: l3,
            sss: l4 * after,
            seg: after,
        }
    }
}

/// One value per loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts<T> {
    pub cls: T,
    pub loc: T,
    pub enc: T,
    pub sss: T,
    pub seg: T,
}

impl<T> LossParts<T> {
    /// Terms in the order cls, loc, enc, sss, seg.
    pub fn to_vec(&self) -> Vec<T>
    where
        T: Clone,
    {
        vec![self.cls.clone(), self.loc.clone(), self.enc.clone(), self.sss.clone(), self.seg.clone()]
    }

    fn zip<'a, U>(&'a self, other: &'a LossParts<U>) -> [(&'a T, &'a U); 5] {
        [
            (&self.cls, &other.cls),
            (&self.loc, &other.loc),
            (&self.enc, &other.enc),
            (&self.sss, &other.sss),
            (&self.seg, &other.seg),
        ]
    }
}

/// Weighted sum of scalar loss values for a 1-based epoch.
pub fn total_loss_value(epoch: usize, parts: &LossParts<f64>, cfg: &TrainConfig) -> f64 {
    cfg.coefficients(epoch).zip(parts).iter().map(|(w, v)| *w * *v).sum()
}

/// Weighted sum of loss tensors; absent or zero-weighted terms are skipped so
/// they add nothing to the graph.
pub fn total_loss(epoch: usize, parts: &LossParts<Option<Tensor>>, cfg: &TrainConfig) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (w, part) in cfg.coefficients(epoch).zip(parts) {
        let (Some(part), true) = (part, *w != 0.0) else { continue };
        let term = part.affine(*w, 0.0)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(Tensor::new(0f32, &Device::Cpu)?),
    }
}

/// Mean squared difference between current and frozen features.
pub fn feature_distillation_loss(feat: &Tensor, feat_old: &Tensor) -> Result<Tensor> {
    if feat.dims() != feat_old.dims() {
        return Err(Error::shape(format!("features {:?} vs {:?}", feat.dims(), feat_old.dims())));
    }
    Ok((feat - feat_old.detach())?.sqr()?.mean_all()?)
}

/// Softmax cross-entropy against dense channel targets, averaged over
/// non-ignored pixels. `targets` holds channel indices or `ignore`.
pub fn dense_cross_entropy(logits: &Tensor, targets: &[u32], ignore: u32) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    if targets.len() != n * h * w {
        return Err(Error::shape(format!("{} targets for {n}x{h}x{w} pixels", targets.len())));
    }
    let mut weights = vec![0f32; n * h * w];
    let mut index = vec![0u32; n * h * w];
    for (k, &t) in targets.iter().enumerate() {
        if t != ignore {
            if t as usize >= c {
                return Err(Error::Data(format!("target channel {t} outside {c} classes")));
            }
            weights[k] = 1.0;
            index[k] = t;
        }
    }
    let counted: f32 = weights.iter().sum();
    if counted == 0.0 {
        return Ok(Tensor::new(0f32, logits.device())?.to_dtype(logits.dtype())?);
    }
    let dev = logits.device();
    let index = Tensor::from_vec(index, (n, 1, h, w), dev)?;
    let weights = Tensor::from_vec(weights, (n, 1, h, w), dev)?.to_dtype(logits.dtype())?;
    let picked = ops::channel_log_softmax(logits)?.gather(&index, 1)?;
    Ok((picked * weights)?.sum_all()?.affine(-1.0 / counted as f64, 0.0)?)
}

/// Trained network with its optimizer state and log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub step: usize,
    pub classes: Vec<ClassId>,
    pub model: Segmenter,
    pub optimizer: Sgd,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config_echo: String) -> Result<Checkpoint> {
        Checkpoint::from_model(self.step, self.classes.clone(), &self.model, self.optimizer.buffers(), config_echo)
    }
}

fn check_images(records: &[SampleRecord]) -> Result<(usize, usize)> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("training set is empty".into()))?;
    let size = (first.image.height(), first.image.width());
    if size.0 % ModelConfig::OUTPUT_STRIDE != 0 || size.1 % ModelConfig::OUTPUT_STRIDE != 0 {
        return Err(Error::Data(format!(
            "image size {}x{} must be a multiple of {}",
            size.0,
            size.1,
            ModelConfig::OUTPUT_STRIDE
        )));
    }
    if let Some(r) = records.iter().find(|r| (r.image.height(), r.image.width()) != size) {
        return Err(Error::Data(format!(
            "mixed image sizes {}x{} and {}x{}",
            size.0,
            size.1,
            r.image.height(),
            r.image.width()
        )));
    }
    Ok(size)
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NumericInput("training loss"));
    }
    Ok(v)
}

fn optimizer_step(model: &Segmenter, sgd: &mut Sgd, grads: &candle_core::backprop::GradStore, lrs: (f64, f64)) -> Result<()> {
    let (backbone, head): (Vec<_>, Vec<_>) = model.params().iter().partition(|(k, _)| k.starts_with("encoder."));
    sgd.step(backbone, grads, lrs.0)?;
    sgd.step(head, grads, lrs.1)
}

/// Dense supervised training of encoder and decoder on the base classes.
pub fn train_base(dataset: &[SampleRecord], schedule: &IncrementalSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = schedule.seen_classes(0)?;
    let mut lut = [u32::MAX; 256];
    for (ch, &c) in classes.iter().enumerate() {
        lut[c as usize] = ch as u32;
    }
    let ignore = schedule.ignore();
    lut[ignore as usize] = u32::from(ignore);
    for (i, r) in dataset.iter().enumerate() {
        if r.dense_mask.is_none() {
            return Err(Error::Supervision(format!("base step record {i} lacks a dense mask")));
        }
    }

    let model = Segmenter::init(cfg.model, classes.len(), false, cfg.seed)?;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    if cfg.epochs == 0 || dataset.is_empty() {
        return Ok(TrainOutcome {
            step: 0,
            classes,
            model,
            optimizer: sgd,
            log,
        });
    }
    let size = check_images(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let max_iter = per_epoch * cfg.epochs;
    let mut global = 0;
    for epoch in 1..=cfg.epochs {
        for (iter, batch) in batches(dataset.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let images: Vec<&RgbImage> = batch.iter().map(|&i| &dataset[i].image).collect();
            let x = image_batch(&images, DType::F32, &Device::Cpu)?;
            let mut targets = Vec::with_capacity(batch.len() * size.0 * size.1);
            for &i in &batch {
                let mask = dataset[i].dense_mask.as_ref().expect("checked above");
                if (mask.height(), mask.width()) != size {
                    return Err(Error::Data(format!("record {i}: mask size differs from image size")));
                }
                for &v in mask.data() {
                    let ch = lut[v as usize];
                    if ch == u32::MAX {
                        return Err(Error::Data(format!("record {i}: class {v} is not a base class")));
                    }
                    targets.push(ch);
                }
            }
            let logits = model.segment(&x)?;
            let loss = dense_cross_entropy(&logits, &targets, u32::from(ignore))?;
            let value = scalar(&loss)?;
            let grads = loss.backward()?;
            let decay = poly_lr(1.0, global, max_iter, cfg.poly_power);
            let lrs = (cfg.base_lr * decay, cfg.head_lr * decay);
            optimizer_step(&model, &mut sgd, &grads, lrs)?;
            log.push(LogRow {
                step: 0,
                epoch,
                iter,
                cls: 0.0,
                loc: 0.0,
                enc: 0.0,
                sss: 0.0,
                seg: value,
                total: value,
                lr: lrs.1,
            });
            global += 1;
        }
    }
    Ok(TrainOutcome {
        step: 0,
        classes,
        model,
        optimizer: sgd,
        log,
    })
}

/// Per-batch quantities of an incremental step, exposed for inspection.
#[derive(Debug)]
pub struct StepForward {
    pub parts: LossParts<Option<Tensor>>,
    pub omega_full: OldModelOutput,
    pub scores: ScoreMap,
    pub supervision: Option<pseudo::PseudoSupervision>,
}

/// Static bookkeeping of an incremental step.
#[derive(Debug, Clone)]
pub struct StepContext<'a> {
    pub schedule: &'a IncrementalSchedule,
    pub t: usize,
    pub num_old: usize,
    pub num_total: usize,
}

impl<'a> StepContext<'a> {
    pub fn new(schedule: &'a IncrementalSchedule, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("incremental steps start at t = 1".into()));
        }
        let num_total = schedule.seen_classes(t)?.len();
        let num_old = schedule.old_classes(t)?.len();
        if num_total - num_old == 1 {
            return Err(Error::UnsupportedSingleClass(format!("step {t}")));
        }
        Ok(Self {
            schedule,
            t,
            num_old,
            num_total,
        })
    }

    /// Channels annotated present for one record.
    pub fn present_channels(&self, labels: &BTreeSet<ClassId>) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&c| {
                self.schedule
                    .channel_of(c, self.t)?
                    .ok_or_else(|| Error::Data(format!("image label {c} is not a class of step {}", self.t)))
            })
            .collect()
    }

    /// Which channels may claim pixels in the refined pseudo ground truth.
    fn allowed_channels(&self, present: &[usize], scope: LabelScope) -> Vec<bool> {
        (0..self.num_total)
            .map(|c| c == 0 || (c < self.num_old && scope == LabelScope::NewOnly) || present.contains(&c))
            .collect()
    }
}

/// Forward pass of one incremental batch and every loss term for `epoch`.
pub fn step_forward(
    model: &Segmenter,
    old: &FrozenModel,
    ctx: &StepContext<'_>,
    x: &Tensor,
    present: &[Vec<usize>],
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<StepForward> {
    let (_, _, h, w) = x.dims4()?;
    let feat = model.encode(x)?;
    let raw = ScoreMap::new(model.localize(&feat)?)?;
    let (fh, fw) = raw.spatial();
    let (feat_old, old_logits) = old.forward(x)?;
    let omega_full = OldModelOutput::from_logits(&old_logits)?;
    let omega = omega_full.downsampled((fh, fw))?;

    let z = cfg.prior.effective_scores(&raw, &omega)?;
    let m = softmax_normalize(&z)?;
    let targets = ClassTargets::new(cfg.supervision, ctx.num_old, ctx.num_total, present, x.dtype(), x.device())?;
    let mut parts = LossParts {
        cls: Some(classification_loss_with(&z, &m, &targets, cfg.hyper())?),
        loc: cfg.prior.prior_loss(&raw, &omega)?,
        enc: Some(feature_distillation_loss(&feat, &feat_old)?),
        sss: None,
        seg: None,
    };
    let mut supervision = None;
    if !cfg.in_warmup(epoch) {
        let m_det = m.detach();
        let small = ops::area_downsample(x, (fh, fw))?;
        let affinity = pamr::compute_affinity(&small)?;
        let refined = pamr::pamr_refine(&m_det, &affinity, cfg.pamr_iterations)?;
        let allowed: Vec<Vec<bool>> = present
            .iter()
            .map(|p| ctx.allowed_channels(p, cfg.supervision))
            .collect();
        let gt = pamr::pseudo_gt_from_refined_masked(&refined, Some(&allowed))?;
        parts.sss = Some(pamr::sss_loss(&m, &gt)?);

        let up = NormalizedMap::from_probs(pseudo::upsample_scores(m_det.probs(), (h, w))?)?;
        let q = pseudo::smooth_labels(&pseudo::hard_labels(&up)?, &up, cfg.alpha)?;
        let q_hat = pseudo::compose_supervision(&q, &omega_full, ctx.schedule, ctx.t, cfg.alpha)?;
        let logits = model.decode(&feat, (h, w))?;
        parts.seg = Some(pseudo::segmentation_loss(&logits, &q_hat)?);
        supervision = Some(q_hat);
    }
    Ok(StepForward {
        parts,
        omega_full,
        scores: z,
        supervision,
    })
}

/// Prepares the network for step `t` from the previous checkpoint: frozen
/// teacher plus a copy whose heads are extended to the new classes.
pub fn prepare_step(
    schedule: &IncrementalSchedule,
    t: usize,
    cfg: &TrainConfig,
    prev: &Checkpoint,
) -> Result<(Segmenter, FrozenModel)> {
    let ctx = StepContext::new(schedule, t)?;
    let expected = schedule.seen_classes(t - 1)?;
    if prev.header.classes != expected {
        return Err(Error::Schema(format!(
            "checkpoint covers classes {:?}, step {t} expects {:?}",
            prev.header.classes, expected
        )));
    }
    let mut model = prev.model()?;
    let frozen = model.snapshot()?;
    model.extend_classes(ctx.num_total - ctx.num_old, cfg.seed.wrapping_add(t as u64))?;
    Ok((model, frozen))
}

/// Weakly supervised training of step `t` from the previous checkpoint.
pub fn train_step(
    dataset: &[SampleRecord],
    schedule: &IncrementalSchedule,
    t: usize,
    cfg: &TrainConfig,
    prev: &Checkpoint,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.warmup_epochs >= cfg.epochs {
        return Err(Error::Config(format!(
            "warmup_epochs ({}) must be below epochs ({})",
            cfg.warmup_epochs, cfg.epochs
        )));
    }
    let ctx = StepContext::new(schedule, t)?;
    let mut present = Vec::with_capacity(dataset.len());
    for (i, r) in dataset.iter().enumerate() {
        if r.dense_mask.is_some() {
            return Err(Error::Supervision(format!(
                "record {i} carries a dense mask; incremental steps train from image-level labels only"
            )));
        }
        let labels = r
            .weak_labels
            .as_ref()
            .ok_or_else(|| Error::Supervision(format!("record {i} has no image-level labels")))?;
        present.push(ctx.present_channels(labels)?);
    }
    let (model, frozen) = prepare_step(schedule, t, cfg, prev)?;
    check_images(dataset)?;

    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(t as u64));
    let per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let decay_iters = per_epoch * (cfg.epochs - cfg.warmup_epochs);
    let mut decay_iter = 0;
    for epoch in 1..=cfg.epochs {
        for (iter, batch) in batches(dataset.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let images: Vec<&RgbImage> = batch.iter().map(|&i| &dataset[i].image).collect();
            let x = image_batch(&images, DType::F32, &Device::Cpu)?;
            let batch_present: Vec<Vec<usize>> = batch.iter().map(|&i| present[i].clone()).collect();
            let fwd = step_forward(&model, &frozen, &ctx, &x, &batch_present, epoch, cfg)?;
            let total = total_loss(epoch, &fwd.parts, cfg)?;
            let value = |p: &Option<Tensor>| p.as_ref().map_or(Ok(0.0), scalar);
            let row_parts = LossParts {
                cls: value(&fwd.parts.cls)?,
                loc: value(&fwd.parts.loc)?,
                enc: value(&fwd.parts.enc)?,
                sss: value(&fwd.parts.sss)?,
                seg: value(&fwd.parts.seg)?,
            };
            let total_value = scalar(&total)?;
            let decay = if cfg.in_warmup(epoch) {
                1.0
            } else {
                let d = poly_lr(1.0, decay_iter, decay_iters, cfg.poly_power);
                decay_iter += 1;
                d
            };
            let lrs = (cfg.base_lr * decay, cfg.head_lr * decay);
            let grads = total.backward()?;
            optimizer_step(&model, &mut sgd, &grads, lrs)?;
            log.push(LogRow {
                step: t,
                epoch,
                iter,
                cls: row_parts.cls,
                loc: row_parts.loc,
                enc: row_parts.enc,
                sss: row_parts.sss,
                seg: row_parts.seg,
                total: total_value,
                lr: lrs.1,
            });
        }
    }
    Ok(TrainOutcome {
        step: t,
        classes: schedule.seen_classes(t)?,
        model,
        optimizer: sgd,
        log,
    })
}

/// Pseudo-supervision the step-`t` network would train on, one grid per
/// record. Records without image-level labels take them from their mask.
pub fn pseudo_supervision(
    model: &Segmenter,
    old: &FrozenModel,
    records: &[SampleRecord],
    schedule: &IncrementalSchedule,
    t: usize,
    cfg: &TrainConfig,
) -> Result<Vec<Grid>> {
    let ctx = StepContext::new(schedule, t)?;
    if !model.has_localizer() {
        return Err(Error::Schema("pseudo-labels need a checkpoint with a localizer".into()));
    }
    let new: BTreeSet<ClassId> = schedule.new_classes(t)?.iter().copied().collect();
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(cfg.batch_size.max(1)) {
        let mut present = Vec::with_capacity(chunk.len());
        for r in chunk {
            let labels = match (&r.weak_labels, &r.eval_mask) {
                (Some(l), _) => l.clone(),
                (None, Some(m)) => derive_weak_labels(m, &new, schedule.ignore()),
                (None, None) => return Err(Error::Supervision("record has neither image-level labels nor a mask".into())),
            };
            present.push(ctx.present_channels(&labels)?);
        }
        let images: Vec<&RgbImage> = chunk.iter().map(|r| &r.image).collect();
        let x = image_batch(&images, DType::F32, &Device::Cpu)?;
        let fwd = step_forward(model, old, &ctx, &x, &present, cfg.warmup_epochs + 1, cfg)?;
        let q = fwd.supervision.expect("evaluated past warmup");
        let (_, c, h, w) = q.q_hat().dims4()?;
        let flat = q.q_hat().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for img in flat.chunks(c * h * w) {
            out.push(Grid::new(c, h, w, img.to_vec())?);
        }
    }
    Ok(out)
}

/// Argmax class ids of the decoder for each image; the localizer is not used.
pub fn predict(model: &Segmenter, classes: &[ClassId], images: &[&RgbImage]) -> Result<Vec<Vec<ClassId>>> {
    if classes.len() != model.num_classes() {
        return Err(Error::Schema(format!(
            "{} class ids for a {}-class model",
            classes.len(),
            model.num_classes()
        )));
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let x = image_batch(chunk, DType::F32, &Device::Cpu)?;
        let logits = model.segment(&x)?;
        let (_, _, h, w) = logits.dims4()?;
        let channels = pseudo::argmax_channels(&logits)?;
        for img in channels.chunks(h * w) {
            out.push(img.iter().map(|&c| classes[c]).collect());
        }
    }
    Ok(out)
}

/// mIoU of the decoder on records carrying ground truth. Classes the model
/// does not know yet are scored as background.
pub fn evaluate(
    model: &Segmenter,
    records: &[SampleRecord],
    schedule: &IncrementalSchedule,
    t: usize,
) -> Result<MetricReport> {
    let classes = schedule.seen_classes(t)?;
    let known: BTreeSet<ClassId> = classes.iter().copied().collect();
    let ignore = schedule.ignore();
    let size = classes.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut cm = ConfusionMatrix::new(size, ignore);
    let images: Vec<&RgbImage> = records.iter().map(|r| &r.image).collect();
    let preds = predict(model, &classes, &images)?;
    for (i, (record, pred)) in records.iter().zip(&preds).enumerate() {
        let gt = record
            .eval_mask
            .as_ref()
            .ok_or_else(|| Error::Supervision(format!("evaluation requires ground truth (record {i})")))?;
        let gt = crate::taxonomy::remap_unseen(gt, &known, ignore);
        cm.accumulate(pred, gt.data())?;
    }
    let (old, new) = if t == 0 {
        (classes, Vec::new())
    } else {
        (schedule.old_classes(t)?, schedule.new_classes(t)?.to_vec())
    };
    cm.miou(&old, &new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(values: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn distillation_examples() {
        let a = t((0..24).map(|i| i as f64 * 0.1).collect(), &[1, 2, 3, 4]);
        assert_eq!(feature_distillation_loss(&a, &a).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let b = (&a + 1.0).unwrap();
        assert_relative_eq!(feature_distillation_loss(&b, &a).unwrap().to_scalar::<f64>().unwrap(), 1.0, epsilon = 1e-12);
        let c = t(vec![0.0; 12], &[1, 1, 3, 4]);
        assert!(matches!(feature_distillation_loss(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn schedule_of_the_combined_loss() {
        let cfg = TrainConfig::default();
        let ones = LossParts {
            cls: 1.0,
            loc: 1.0,
            enc: 1.0,
            sss: 1.0,
            seg: 1.0,
        };
        assert_eq!(total_loss_value(3, &ones, &cfg), 3.0);
        assert_eq!(total_loss_value(5, &ones, &cfg), 3.0);
        assert_eq!(total_loss_value(6, &ones, &cfg), 5.0);
        let no_prior = TrainConfig {
            loss_weights: [1.0, 0.0, 1.0, 1.0],
            ..cfg.clone()
        };
        assert_eq!(total_loss_value(6, &ones, &no_prior), 4.0);

        let one = |v: f64| Some(Tensor::new(v, &Device::Cpu).unwrap());
        let parts = LossParts {
            cls: one(0.5),
            loc: one(0.25),
            enc: one(2.0),
            sss: one(4.0),
            seg: None,
        };
        let sum = total_loss(7, &parts, &cfg).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(sum, 0.5 + 0.25 + 2.0 + 4.0);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            alpha: 1.5,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            prior: PriorVariant::Fixed,
            supervision: LabelScope::AllClasses,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let text = toml::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), TrainConfig::default());
    }

    #[test]
    fn dense_cross_entropy_matches_loop() {
        let logits = vec![0.2, -1.0, 1.5, 0.3, 0.0, 2.0, -0.5, 0.7, 1.1, 0.4, -0.2, 0.9];
        let x = Tensor::from_vec(logits.iter().map(|v| *v as f32).collect::<Vec<_>>(), (1, 3, 2, 2), &Device::Cpu).unwrap();
        let targets = [0u32, 2, 255, 1];
        let got = dense_cross_entropy(&x, &targets, 255).unwrap().to_scalar::<f32>().unwrap() as f64;
        let mut want = 0.0;
        for (i, &tg) in targets.iter().enumerate() {
            if tg == 255 {
                continue;
            }
            let z: Vec<f64> = (0..3).map(|c| logits[c * 4 + i]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - z[tg as usize];
        }
        assert_relative_eq!(got, want / 3.0, epsilon = 1e-5);
    }
}
