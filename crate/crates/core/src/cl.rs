//! Multi-task continual learning.
//!
//! Training is split into rounds; each round visits every task once, for
//! one epoch, in an order reshuffled per round. The learning rate follows a
//! periodic cosine schedule and the backbone is regularised towards an
//! anchor snapshot taken at the start of every iterate:
//!
//! ```text
//! η_t = η_min + ½(η_max − η_min)(1 + cos(2π·t/T))
//! Ω(w) = α‖w − w⁰‖² + (1 − α)‖w‖²
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nets::{EncoderConfig, ParamVector};
use crate::seed::{keyed_rng, stream};
use crate::task::{epoch_order, init_head, run_epoch, TaskData};

/// Cyclic cosine learning rate at step `t` of a period of `T` steps.
///
/// The full-cycle form returns to `η_max` at `t = T`; `t` is taken modulo
/// `T`. The half-cycle variant anneals to `η_min` over the period and then
/// restarts.
pub fn cosine_lr(t: usize, period: usize, eta_min: f64, eta_max: f64) -> Result<f64> {
    cosine_lr_with(t, period, eta_min, eta_max, false)
}

pub fn cosine_lr_with(
    t: usize,
    period: usize,
    eta_min: f64,
    eta_max: f64,
    half_cycle: bool,
) -> Result<f64> {
    ensure!(period >= 1, Contract, "cosine period must be at least 1");
    ensure!(
        eta_max >= eta_min,
        Contract,
        "eta_max {eta_max} below eta_min {eta_min}"
    );
    let phase = (t % period) as f64 / period as f64;
    let angle = if half_cycle { PI * phase } else { 2.0 * PI * phase };
    Ok(eta_min + 0.5 * (eta_max - eta_min) * (1.0 + angle.cos()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round_index: usize,
    pub task_permutation: Vec<usize>,
}

/// Task order for a round, keyed on `(seed, round_index)`.
pub fn reshuffle_tasks(round_index: usize, n_tasks: usize, seed: u64) -> RoundPlan {
    let mut rng = keyed_rng(seed, &[stream::TASK_ORDER, round_index as u64]);
    RoundPlan {
        round_index,
        task_permutation: crate::nets::permutation(n_tasks, &mut rng),
    }
}

/// Frozen backbone weights at the start of an iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSnapshot {
    w0: Vec<f64>,
    pub round: usize,
    pub iterate: usize,
}

impl AnchorSnapshot {
    pub fn new(w0: Vec<f64>, round: usize, iterate: usize) -> Self {
        Self { w0, round, iterate }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w0
    }
}

pub fn snapshot_anchor(backbone: &ParamVector, round: usize, iterate: usize) -> AnchorSnapshot {
    AnchorSnapshot::new(backbone.flatten(), round, iterate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    pub alpha: f64,
    /// Weight of Ω relative to the task loss.
    pub lambda: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 0.01,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.alpha),
            Config,
            "alpha {} outside [0, 1]",
            self.alpha
        );
        ensure!(self.lambda >= 0.0, Config, "lambda {} is negative", self.lambda);
        Ok(())
    }
}

fn check_len(w: &[f64], anchor: &AnchorSnapshot) -> Result<()> {
    if w.len() != anchor.w0.len() {
        return Err(Error::Dimension(format!(
            "L2-SP: weights have {} entries, anchor {}",
            w.len(),
            anchor.w0.len()
        )));
    }
    Ok(())
}

/// `α‖w − w⁰‖² + (1 − α)‖w‖²`.
pub fn l2sp_penalty(w: &[f64], anchor: &AnchorSnapshot, alpha: f64) -> Result<f64> {
    check_len(w, anchor)?;
    let (mut dist, mut ridge) = (0.0, 0.0);
    for (wv, av) in w.iter().zip(&anchor.w0) {
        dist += (wv - av) * (wv - av);
        ridge += wv * wv;
    }
    Ok(alpha * dist + (1.0 - alpha) * ridge)
}

/// `2α(w − w⁰) + 2(1 − α)w`.
pub fn l2sp_grad(w: &[f64], anchor: &AnchorSnapshot, alpha: f64) -> Result<Vec<f64>> {
    check_len(w, anchor)?;
    Ok(w.iter()
        .zip(&anchor.w0)
        .map(|(wv, av)| 2.0 * alpha * (wv - av) + 2.0 * (1.0 - alpha) * wv)
        .collect())
}

/// `‖w − w⁰‖`.
pub fn drift_norm(w: &[f64], anchor: &AnchorSnapshot) -> Result<f64> {
    check_len(w, anchor)?;
    Ok(w.iter()
        .zip(&anchor.w0)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub rounds: usize,
    pub eta_max: f64,
    pub eta_min: f64,
    /// Steps per cosine period; `None` means one round's worth of steps.
    #[serde(default)]
    pub period_t: Option<usize>,
    #[serde(default)]
    pub half_cycle: bool,
    pub batch_size: usize,
    /// Plain decay for heads, and for the backbone while L²-SP is off.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            eta_max: 0.1,
            eta_min: 0.001,
            period_t: None,
            half_cycle: false,
            batch_size: 16,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.eta_max >= self.eta_min && self.eta_min >= 0.0,
            Config,
            "need eta_max ≥ eta_min ≥ 0"
        );
        ensure!(self.period_t != Some(0), Config, "period_t must be at least 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be positive");
        ensure!(self.weight_decay >= 0.0, Config, "weight_decay is negative");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClFlags {
    pub reshuffle: bool,
    pub cyclic_lr: bool,
    pub l2sp: bool,
}

impl ClFlags {
    pub const ALL_ON: ClFlags = ClFlags {
        reshuffle: true,
        cyclic_lr: true,
        l2sp: true,
    };
    pub const ALL_OFF: ClFlags = ClFlags {
        reshuffle: false,
        cyclic_lr: false,
        l2sp: false,
    };
}

/// One row of the per-iterate trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub round: usize,
    pub task_id: String,
    pub task_order_pos: usize,
    pub epoch_loss: f64,
    pub lr_first_step: f64,
    pub drift_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ClOutput {
    pub backbone: ParamVector,
    /// Task heads, persisted across rounds, keyed by task id.
    pub heads: BTreeMap<String, ParamVector>,
    pub plans: Vec<RoundPlan>,
    pub trace: Vec<IterateRecord>,
}

pub const TRACE_CSV_HEADER: &str = "round,task_id,task_order_pos,epoch_loss,lr_first_step,drift_norm";

pub fn trace_csv(trace: &[IterateRecord]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.round, r.task_id, r.task_order_pos, r.epoch_loss, r.lr_first_step, r.drift_norm
        ));
    }
    out
}

/// Runs the continual-learning stage over `tasks` starting from `backbone0`.
pub fn cl_train(
    enc: &EncoderConfig,
    backbone0: &ParamVector,
    tasks: &[TaskData],
    sched: &ScheduleConfig,
    reg: &RegConfig,
    flags: ClFlags,
) -> Result<ClOutput> {
    ensure!(!tasks.is_empty(), Contract, "continual learning needs at least one task");
    sched.validate()?;
    reg.validate()?;
    let mut backbone = backbone0.clone();
    let mut heads = tasks
        .iter()
        .map(|t| Ok((t.task_id.clone(), init_head(enc, t, sched.seed)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let period = sched
        .period_t
        .unwrap_or_else(|| tasks.iter().map(|t| t.steps_per_epoch(sched.batch_size)).sum());
    let backbone_wd = if flags.l2sp { 0.0 } else { sched.weight_decay };

    let mut global_step = 0usize;
    let mut plans = Vec::with_capacity(sched.rounds);
    let mut trace = Vec::with_capacity(sched.rounds * tasks.len());
    for round in 0..sched.rounds {
        let plan = if flags.reshuffle {
            reshuffle_tasks(round, tasks.len(), sched.seed)
        } else {
            RoundPlan {
                round_index: round,
                task_permutation: (0..tasks.len()).collect(),
            }
        };
        for (pos, &ti) in plan.task_permutation.iter().enumerate() {
            let task = &tasks[ti];
            let anchor = snapshot_anchor(&backbone, round, pos);
            let head = heads.get_mut(&task.task_id).expect("head per task");
            let order = epoch_order(task, sched.seed, round as u64);
            let start = global_step;
            let stats = run_epoch(
                enc,
                task,
                &mut backbone,
                head,
                &order,
                sched.batch_size,
                |k| {
                    if flags.cyclic_lr {
                        cosine_lr_with(start + k, period, sched.eta_min, sched.eta_max, sched.half_cycle)
                    } else {
                        Ok(sched.eta_max)
                    }
                },
                backbone_wd,
                sched.weight_decay,
                flags.l2sp.then_some((&anchor, *reg)),
            )?;
            global_step += stats.steps;
            let drift = drift_norm(&backbone.flatten(), &anchor)?;
            log::debug!(
                "round {round} pos {pos} task {} loss {:.4} drift {:.4}",
                task.task_id,
                stats.mean_loss,
                drift
            );
            trace.push(IterateRecord {
                round,
                task_id: task.task_id.clone(),
                task_order_pos: pos,
                epoch_loss: stats.mean_loss,
                lr_first_step: stats.lr_first_step,
                drift_norm: drift,
            });
        }
        plans.push(plan);
    }
    Ok(ClOutput {
        backbone,
        heads,
        plans,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 0.001, 0.1).unwrap(), 0.1);
        assert!((cosine_lr(50, 100, 0.001, 0.1).unwrap() - 0.001).abs() < 1e-15);
        assert!((cosine_lr(25, 100, 0.001, 0.1).unwrap() - 0.0505).abs() < 1e-12);
        assert_eq!(cosine_lr(100, 100, 0.001, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(0, 10, 0.2, 0.1).is_err());
        assert!(cosine_lr(0, 0, 0.0, 0.1).is_err());
    }

    #[test]
    fn half_cycle_reaches_min_at_period_end() {
        let v = cosine_lr_with(99, 100, 0.0, 1.0, true).unwrap();
        assert!(v < 1e-3);
        assert_eq!(cosine_lr_with(100, 100, 0.0, 1.0, true).unwrap(), 1.0);
    }

    #[test]
    fn reshuffle_single_task_and_determinism() {
        assert_eq!(reshuffle_tasks(4, 1, 9).task_permutation, vec![0]);
        assert_eq!(reshuffle_tasks(3, 4, 7), reshuffle_tasks(3, 4, 7));
    }

    #[test]
    fn penalty_closed_forms() {
        let w0 = vec![1.0, -2.0, 3.0];
        let a = AnchorSnapshot::new(w0.clone(), 0, 0);
        let v = l2sp_penalty(&w0, &a, 0.3).unwrap();
        assert!((v - 0.7 * 14.0).abs() < 1e-12);
        let origin = AnchorSnapshot::new(vec![0.0; 3], 0, 0);
        assert_eq!(l2sp_penalty(&w0, &origin, 1.0).unwrap(), 14.0);
        assert!(matches!(
            l2sp_penalty(&[1.0], &a, 0.5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn snapshot_is_a_copy() {
        let mut p = ParamVector::new();
        p.insert("w", crate::tensor::Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let s = snapshot_anchor(&p, 2, 3);
        assert_eq!((s.round, s.iterate), (2, 3));
        p.get_mut("w").unwrap().data_mut()[0] = 9.0;
        assert_eq!(s.weights(), &[1.0, 2.0]);
        // α-term is zero at capture.
        let w = vec![1.0, 2.0];
        assert_eq!(l2sp_penalty(&w, &s, 1.0).unwrap(), 0.0);
    }
}
