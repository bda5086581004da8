//! Supervised task plumbing shared by continual learning and fine-tuning:
//! prepared task samples, the per-minibatch SGD step and prediction.

use crate::autograd::{Tape, Var};
use crate::cl::{l2sp_grad, AnchorSnapshot, RegConfig};
use crate::error::{ensure, Error, Result};
use crate::nets::{encoder_forward, head_forward, EncoderConfig, HeadConfig, HeadKind, ParamVector};
use crate::optim::sgd_step;
use crate::preprocess::{prepare_image, resize_mask, DatasetManifest, GrayNorm, ImageRecord};
use crate::seed::{hash_str, keyed_rng, stream};
use crate::tensor::Tensor;

/// A labelled dataset bound to the head that learns it.
#[derive(Debug, Clone)]
pub struct TaskBinding {
    pub task_id: String,
    pub manifest: DatasetManifest,
    pub head: HeadConfig,
}

impl TaskBinding {
    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        let head = manifest.task.ok_or_else(|| {
            Error::Contract(format!("dataset `{}` has no task", manifest.dataset_id))
        })?;
        Ok(Self {
            task_id: manifest.dataset_id.clone(),
            manifest,
            head,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    /// Row-major per-pixel labels at the encoder resolution.
    Mask(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub target: Target,
}

/// A task with every split normalised and resized for the encoder.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task_id: String,
    pub head: HeadConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskData {
    pub fn prepare(binding: &TaskBinding, target: (usize, usize), norm: GrayNorm) -> Result<Self> {
        binding.head.validate()?;
        let m = &binding.manifest;
        let (mean, std) = norm.stats_for(m);
        let sample = |rec: &ImageRecord| -> Result<Sample> {
            let image = prepare_image(rec, mean, std, target)?;
            let target = match binding.head.kind {
                HeadKind::Classification => {
                    let l = rec.label.ok_or_else(|| {
                        Error::Contract(format!("`{}`: record without label", m.dataset_id))
                    })?;
                    ensure!(
                        l < binding.head.num_classes,
                        Contract,
                        "`{}`: label {l} out of range",
                        m.dataset_id
                    );
                    Target::Class(l)
                }
                HeadKind::Segmentation => {
                    let mask = rec.mask.as_ref().ok_or_else(|| {
                        Error::Contract(format!("`{}`: record without mask", m.dataset_id))
                    })?;
                    Target::Mask(resize_mask(mask, rec.height(), rec.width(), target.0, target.1))
                }
            };
            Ok(Sample { image, target })
        };
        let split = |idx: &[usize]| -> Result<Vec<Sample>> {
            idx.iter().map(|&i| sample(&m.records[i])).collect()
        };
        Ok(Self {
            task_id: binding.task_id.clone(),
            head: binding.head,
            train: split(&m.splits.train)?,
            val: split(&m.splits.val)?,
            test: split(&m.splits.test)?,
        })
    }

    pub fn key(&self) -> u64 {
        hash_str(&self.task_id)
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.train.len().div_ceil(batch_size)
    }
}

/// Fresh head parameters for a task, keyed on `(seed, task_id)`.
pub fn init_head(enc: &EncoderConfig, task: &TaskData, seed: u64) -> Result<ParamVector> {
    task.head.init(enc, &mut keyed_rng(seed, &[stream::HEAD_INIT, task.key()]))
}

/// Minibatch order for one pass over a task's training split.
pub fn epoch_order(task: &TaskData, seed: u64, pass: u64) -> Vec<usize> {
    crate::nets::permutation(
        task.train.len(),
        &mut keyed_rng(seed, &[stream::BATCH_ORDER, pass, task.key()]),
    )
}

/// Mean task loss over a minibatch, recorded on `tape`.
fn batch_loss(
    tape: &mut Tape,
    enc: &EncoderConfig,
    head_cfg: &HeadConfig,
    backbone: &crate::nets::BoundParams,
    head: &crate::nets::BoundParams,
    batch: &[&Sample],
) -> Result<Var> {
    let hw = enc.input_hw;
    let mut logits = Vec::with_capacity(batch.len());
    let mut per_sample = Vec::new();
    let mut labels = Vec::with_capacity(batch.len());
    for s in batch {
        let x = tape.constant(s.image.clone());
        let out = encoder_forward(tape, enc, backbone, x)?;
        match (&s.target, head_cfg.kind) {
            (Target::Class(l), HeadKind::Classification) => {
                logits.push(head_forward(tape, head_cfg, head, out.embedding, hw)?);
                labels.push(*l);
            }
            (Target::Mask(mask), HeadKind::Segmentation) => {
                let z = head_forward(tape, head_cfg, head, out.feature_map, hw)?;
                let z = tape.reshape(z, &[head_cfg.num_classes, hw.0 * hw.1])?;
                let z = tape.transpose(z)?;
                per_sample.push(tape.softmax_cross_entropy(z, mask)?);
            }
            _ => return Err(Error::Contract("sample target does not match head kind".into())),
        }
    }
    if head_cfg.kind == HeadKind::Classification {
        let z = tape.concat_rows(&logits)?;
        tape.softmax_cross_entropy(z, &labels)
    } else {
        tape.mean_of(&per_sample)
    }
}

/// Optimiser settings for one SGD step on a backbone + head pair.
#[derive(Debug, Clone, Copy)]
pub struct StepSettings<'a> {
    pub lr: f64,
    pub backbone_weight_decay: f64,
    pub head_weight_decay: f64,
    /// Adds `λ·Ω(w)` against this anchor to the backbone objective.
    pub anchor: Option<(&'a AnchorSnapshot, RegConfig)>,
}

/// One SGD step; returns the task loss before the update.
pub fn train_step(
    enc: &EncoderConfig,
    head_cfg: &HeadConfig,
    backbone: &mut ParamVector,
    head: &mut ParamVector,
    batch: &[&Sample],
    settings: StepSettings<'_>,
) -> Result<f64> {
    ensure!(!batch.is_empty(), Contract, "empty minibatch");
    let mut tape = Tape::new();
    let bb = backbone.bind(&mut tape, true);
    let hb = head.bind(&mut tape, true);
    let loss = batch_loss(&mut tape, enc, head_cfg, &bb, &hb, batch)?;
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    let mut g_backbone = backbone.gradients(&tape, &bb)?;
    let g_head = head.gradients(&tape, &hb)?;
    if let Some((anchor, reg)) = settings.anchor {
        let w = backbone.flatten();
        let reg_grad = l2sp_grad(&w, anchor, reg.alpha)?;
        let mut g = g_backbone.flatten();
        g.iter_mut()
            .zip(&reg_grad)
            .for_each(|(gv, rv)| *gv += reg.lambda * rv);
        g_backbone = ParamVector::unflatten(&g, backbone)?;
    }
    sgd_step(backbone, &g_backbone, settings.lr, settings.backbone_weight_decay)?;
    sgd_step(head, &g_head, settings.lr, settings.head_weight_decay)?;
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub lr_first_step: f64,
    pub steps: usize,
}

/// One pass over `order` in minibatches; `lr_at(k)` gives the rate of the
/// `k`-th step of this pass.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch(
    enc: &EncoderConfig,
    task: &TaskData,
    backbone: &mut ParamVector,
    head: &mut ParamVector,
    order: &[usize],
    batch_size: usize,
    mut lr_at: impl FnMut(usize) -> Result<f64>,
    backbone_weight_decay: f64,
    head_weight_decay: f64,
    anchor: Option<(&AnchorSnapshot, RegConfig)>,
) -> Result<EpochStats> {
    ensure!(batch_size >= 1, Contract, "batch size must be positive");
    ensure!(!order.is_empty(), Contract, "`{}`: empty training split", task.task_id);
    let mut total = 0.0;
    let mut lr_first = f64::NAN;
    let mut steps = 0;
    for chunk in order.chunks(batch_size) {
        let lr = lr_at(steps)?;
        if steps == 0 {
            lr_first = lr;
        }
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &task.train[i]).collect();
        total += train_step(
            enc,
            &task.head,
            backbone,
            head,
            &batch,
            StepSettings {
                lr,
                backbone_weight_decay,
                head_weight_decay,
                anchor,
            },
        )?;
        steps += 1;
    }
    Ok(EpochStats {
        mean_loss: total / steps as f64,
        lr_first_step: lr_first,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Softmax class probabilities.
    Probs(Vec<f64>),
    /// Per-pixel argmax labels.
    Mask(Vec<usize>),
}

pub fn predict(
    enc: &EncoderConfig,
    head_cfg: &HeadConfig,
    backbone: &ParamVector,
    head: &ParamVector,
    image: &Tensor,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let bb = backbone.bind(&mut tape, false);
    let hb = head.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let out = encoder_forward(&mut tape, enc, &bb, x)?;
    match head_cfg.kind {
        HeadKind::Classification => {
            let z = head_forward(&mut tape, head_cfg, &hb, out.embedding, enc.input_hw)?;
            let z = tape.value(z).data();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = e.iter().sum();
            Ok(Prediction::Probs(e.into_iter().map(|v| v / sum).collect()))
        }
        HeadKind::Segmentation => {
            let z = head_forward(&mut tape, head_cfg, &hb, out.feature_map, enc.input_hw)?;
            let z = tape.value(z).data();
            let plane = enc.input_hw.0 * enc.input_hw.1;
            let mask = (0..plane)
                .map(|p| {
                    (0..head_cfg.num_classes)
                        .max_by(|&a, &b| z[a * plane + p].total_cmp(&z[b * plane + p]))
                        .unwrap_or(0)
                })
                .collect();
            Ok(Prediction::Mask(mask))
        }
    }
}

/// Fraction of correctly classified samples (classification tasks only).
pub fn accuracy(
    enc: &EncoderConfig,
    task: &TaskData,
    samples: &[Sample],
    backbone: &ParamVector,
    head: &ParamVector,
) -> Result<f64> {
    ensure!(!samples.is_empty(), Contract, "no samples to score");
    let mut correct = 0usize;
    for s in samples {
        let (Prediction::Probs(p), Target::Class(l)) =
            (predict(enc, &task.head, backbone, head, &s.image)?, &s.target)
        else {
            return Err(Error::Contract("accuracy needs a classification task".into()));
        };
        let arg = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
        correct += usize::from(arg == *l);
    }
    Ok(correct as f64 / samples.len() as f64)
}
