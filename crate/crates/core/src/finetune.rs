//! Independent per-task fine-tuning with step learning-rate decay, and the
//! evaluation report for a fitted model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::metrics::{
    auc_mann_whitney, bootstrap_auc_ci, classification_metrics, roc_points, segmentation_metrics,
};
use crate::nets::{EncoderConfig, HeadConfig, HeadKind, ParamVector};
use crate::task::{epoch_order, init_head, predict, run_epoch, Prediction, Target, TaskData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate drops.
    pub step_size: usize,
    /// Multiplicative drop factor.
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub bootstrap_trials: usize,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_trials() -> usize {
    100
}
fn default_level() -> f64 {
    0.95
}
fn default_threshold() -> f64 {
    0.5
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            base_lr: 0.01,
            weight_decay: 1e-4,
            step_size: 8,
            gamma: 0.1,
            batch_size: 16,
            seed: 0,
            bootstrap_trials: default_trials(),
            ci_level: default_level(),
            threshold: default_threshold(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.gamma > 0.0 && self.gamma <= 1.0,
            Config,
            "gamma {} outside (0, 1]",
            self.gamma
        );
        ensure!(self.step_size >= 1, Config, "step_size must be at least 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be positive");
        ensure!(self.base_lr >= 0.0, Config, "base_lr is negative");
        ensure!(self.weight_decay >= 0.0, Config, "weight_decay is negative");
        Ok(())
    }

    /// `base_lr · gamma^floor(epoch / step_size)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi((epoch / self.step_size) as i32)
    }
}

/// A backbone + head pair fitted to one task.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub task_id: String,
    pub head_cfg: HeadConfig,
    pub backbone: ParamVector,
    pub head: ParamVector,
}

impl FittedModel {
    /// Backbone and head in one parameter set (`enc.*` and `head.*`).
    pub fn params(&self) -> Result<ParamVector> {
        self.backbone.merged(&self.head)
    }

    pub fn from_params(task_id: &str, head_cfg: HeadConfig, params: &ParamVector) -> Self {
        Self {
            task_id: task_id.to_string(),
            head_cfg,
            backbone: params.with_prefix("enc."),
            head: params.with_prefix("head."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub kind: HeadKind,
    /// Classification: acc, auc, auc_ci_low, auc_ci_high, sen, spe.
    /// Segmentation: dice, miou. `null` marks an undefined rate.
    pub metrics: BTreeMap<String, Option<f64>>,
    pub n_test: usize,
    #[serde(default)]
    pub config_hash: String,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied().flatten()
    }

    /// AUC for classification tasks, Dice for segmentation tasks.
    pub fn headline(&self) -> Option<f64> {
        match self.kind {
            HeadKind::Classification => self.metric("auc"),
            HeadKind::Segmentation => self.metric("dice"),
        }
    }
}

/// Test-split evaluation plus ROC points for classification tasks.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub roc: Option<Vec<(f64, f64, f64)>>,
}

pub fn evaluate(
    enc: &EncoderConfig,
    model: &FittedModel,
    task: &TaskData,
    cfg: &FinetuneConfig,
) -> Result<Evaluation> {
    ensure!(!task.test.is_empty(), Contract, "`{}`: empty test split", task.task_id);
    let mut metrics = BTreeMap::new();
    let mut roc = None;
    match task.head.kind {
        HeadKind::Classification => {
            let (mut scores, mut labels) = (Vec::new(), Vec::new());
            for s in &task.test {
                let (Prediction::Probs(p), Target::Class(l)) =
                    (predict(enc, &model.head_cfg, &model.backbone, &model.head, &s.image)?, &s.target)
                else {
                    return Err(Error::Contract("classification target expected".into()));
                };
                scores.push(p[1]);
                labels.push(*l);
            }
            let rates = classification_metrics(&scores, &labels, cfg.threshold)?;
            metrics.insert("acc".into(), Some(rates.acc));
            metrics.insert("sen".into(), rates.sen);
            metrics.insert("spe".into(), rates.spe);
            match auc_mann_whitney(&scores, &labels) {
                Ok(auc) => {
                    let (lo, hi) =
                        bootstrap_auc_ci(&scores, &labels, cfg.bootstrap_trials, cfg.ci_level, cfg.seed)?;
                    metrics.insert("auc".into(), Some(auc));
                    metrics.insert("auc_ci_low".into(), Some(lo.min(auc)));
                    metrics.insert("auc_ci_high".into(), Some(hi.max(auc)));
                    roc = Some(roc_points(&scores, &labels)?);
                }
                Err(Error::UndefinedAuc(_)) => {
                    for k in ["auc", "auc_ci_low", "auc_ci_high"] {
                        metrics.insert(k.into(), None);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        HeadKind::Segmentation => {
            let (mut pred, mut truth) = (Vec::new(), Vec::new());
            for s in &task.test {
                let (Prediction::Mask(p), Target::Mask(g)) =
                    (predict(enc, &model.head_cfg, &model.backbone, &model.head, &s.image)?, &s.target)
                else {
                    return Err(Error::Contract("segmentation target expected".into()));
                };
                pred.extend(p);
                truth.extend_from_slice(g);
            }
            let seg = segmentation_metrics(&pred, &truth, task.head.num_classes)?;
            metrics.insert("dice".into(), Some(seg.dice));
            metrics.insert("miou".into(), Some(seg.miou));
        }
    }
    Ok(Evaluation {
        report: EvalReport {
            task_id: task.task_id.clone(),
            kind: task.head.kind,
            metrics,
            n_test: task.test.len(),
            config_hash: String::new(),
        },
        roc,
    })
}

pub fn roc_csv(points: &[(f64, f64, f64)]) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for (f, t, thr) in points {
        out.push_str(&format!("{f},{t},{thr}\n"));
    }
    out
}

/// Fits a fresh head plus a private copy of `backbone` to one task and
/// evaluates it on the task's test split.
pub fn finetune_task(
    enc: &EncoderConfig,
    backbone: &ParamVector,
    task: &TaskData,
    cfg: &FinetuneConfig,
) -> Result<(FittedModel, Evaluation)> {
    cfg.validate()?;
    ensure!(!task.train.is_empty(), Contract, "`{}`: empty train split", task.task_id);
    ensure!(!task.test.is_empty(), Contract, "`{}`: empty test split", task.task_id);
    let mut bb = backbone.clone();
    let mut head = init_head(enc, task, cfg.seed)?;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let order = epoch_order(task, cfg.seed, epoch as u64);
        let stats = run_epoch(
            enc,
            task,
            &mut bb,
            &mut head,
            &order,
            cfg.batch_size,
            |_| Ok(lr),
            cfg.weight_decay,
            cfg.weight_decay,
            None,
        )?;
        log::debug!("finetune {} epoch {epoch}: loss {:.4}", task.task_id, stats.mean_loss);
    }
    let model = FittedModel {
        task_id: task.task_id.clone(),
        head_cfg: task.head,
        backbone: bb,
        head,
    };
    let eval = evaluate(enc, &model, task, cfg)?;
    Ok((model, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let cfg = FinetuneConfig {
            base_lr: 0.1,
            step_size: 2,
            gamma: 0.5,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..5).map(|e| cfg.lr_at_epoch(e)).collect();
        assert_eq!(lrs, vec![0.1, 0.1, 0.05, 0.05, 0.025]);
    }

    #[test]
    fn rejects_bad_gamma() {
        let cfg = FinetuneConfig {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
