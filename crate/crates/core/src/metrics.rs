//! Evaluation metrics: accuracy/sensitivity/specificity, Mann–Whitney AUC
//! with a percentile bootstrap interval, ROC points, Dice and mIoU.
//!
//! All functions are pure and read no training state.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed::{keyed_rng, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryRates {
    pub acc: f64,
    /// `None` when there are no positives.
    pub sen: Option<f64>,
    /// `None` when there are no negatives.
    pub spe: Option<f64>,
}

fn check_binary(scores: &[f64], labels: &[usize]) -> Result<()> {
    ensure!(
        scores.len() == labels.len(),
        Contract,
        "{} scores for {} labels",
        scores.len(),
        labels.len()
    );
    ensure!(!scores.is_empty(), Contract, "no samples");
    ensure!(labels.iter().all(|&l| l <= 1), Contract, "labels must be 0 or 1");
    ensure!(scores.iter().all(|s| !s.is_nan()), Contract, "NaN score");
    Ok(())
}

/// Thresholded rates; a score `>= threshold` predicts the positive class.
pub fn classification_metrics(scores: &[f64], labels: &[usize], threshold: f64) -> Result<BinaryRates> {
    check_binary(scores, labels)?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(BinaryRates {
        acc: (tp + tn) as f64 / scores.len() as f64,
        sen: ratio(tp, tp + fn_),
        spe: ratio(tn, tn + fp),
    })
}

/// Best accuracy over every threshold, with the threshold achieving it.
/// Candidates are each distinct score and `+∞` (everything negative).
pub fn optimal_threshold_accuracy(scores: &[f64], labels: &[usize]) -> Result<(f64, f64)> {
    check_binary(scores, labels)?;
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for thr in candidates {
        let acc = classification_metrics(scores, labels, thr)?.acc;
        if acc > best.0 {
            best = (acc, thr);
        }
    }
    Ok(best)
}

/// Probability that a random positive outranks a random negative, ties
/// counted half.
pub fn auc_mann_whitney(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_binary(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann–Whitney U, kept integral so no rounding occurs.
    let mut doubled_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(doubled_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Linear-interpolated empirical quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Redraw budget per trial for resamples that miss a class.
pub const BOOTSTRAP_MAX_RETRIES: usize = 100;

/// Percentile bootstrap interval of the AUC over `trials` resamples of
/// the test set (with replacement). Trial `t` draws from a stream keyed on
/// `(seed, t)`.
pub fn bootstrap_auc_ci(
    scores: &[f64],
    labels: &[usize],
    trials: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    bootstrap_with_retries(scores, labels, trials, level, seed, BOOTSTRAP_MAX_RETRIES)
}

fn bootstrap_with_retries(
    scores: &[f64],
    labels: &[usize],
    trials: usize,
    level: f64,
    seed: u64,
    max_retries: usize,
) -> Result<(f64, f64)> {
    auc_mann_whitney(scores, labels)?;
    ensure!(trials >= 1, Contract, "bootstrap needs at least one trial");
    ensure!(
        level > 0.0 && level < 1.0,
        Contract,
        "confidence level {level} outside (0, 1)"
    );
    let n = scores.len();
    let mut aucs = Vec::with_capacity(trials);
    let (mut s, mut l) = (vec![0.0; n], vec![0; n]);
    for t in 0..trials {
        let mut rng = keyed_rng(seed, &[stream::BOOTSTRAP, t as u64]);
        let mut done = false;
        for _ in 0..max_retries {
            for k in 0..n {
                let i = rng.random_range(0..n);
                s[k] = scores[i];
                l[k] = labels[i];
            }
            let pos = l.iter().filter(|&&v| v == 1).count();
            if pos > 0 && pos < n {
                aucs.push(auc_mann_whitney(&s, &l)?);
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::DegenerateCi(format!(
                "trial {t}: {max_retries} resamples all contained one class"
            )));
        }
    }
    aucs.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&aucs, tail), quantile(&aucs, 1.0 - tail)))
}

/// ROC operating points `(fpr, tpr, threshold)`, one per distinct score,
/// from the strictest threshold down, starting at `(0, 0, +inf)`.
pub fn roc_points(scores: &[f64], labels: &[usize]) -> Result<Vec<(f64, f64, f64)>> {
    check_binary(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::UndefinedAuc("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((fp / n_neg, tp / n_pos, thr));
    }
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub miou: f64,
}

fn check_masks(pred: &[usize], truth: &[usize], n_labels: usize) -> Result<()> {
    ensure!(
        pred.len() == truth.len(),
        Contract,
        "mask sizes differ: {} vs {}",
        pred.len(),
        truth.len()
    );
    ensure!(
        pred.iter().chain(truth).all(|&v| v < n_labels),
        Contract,
        "mask label outside 0..{n_labels}"
    );
    Ok(())
}

/// `|P∩G| / |P∪G|` for one label, `None` when the label is absent from both.
pub fn iou_for_label(pred: &[usize], truth: &[usize], label: usize) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(truth) {
        let (a, b) = (p == label, g == label);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Foreground Dice (any non-zero label is foreground) and mean IoU over
/// the labels present in either mask. Two empty foregrounds score Dice 1.
pub fn segmentation_metrics(pred: &[usize], truth: &[usize], n_labels: usize) -> Result<SegMetrics> {
    check_masks(pred, truth, n_labels)?;
    let (mut inter, mut p_sz, mut g_sz) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(truth) {
        let (a, b) = (p != 0, g != 0);
        inter += (a && b) as usize;
        p_sz += a as usize;
        g_sz += b as usize;
    }
    let dice = if p_sz + g_sz == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p_sz + g_sz) as f64
    };
    let ious: Vec<f64> = (0..n_labels)
        .filter_map(|l| iou_for_label(pred, truth, l))
        .collect();
    let miou = if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    Ok(SegMetrics { dice, miou })
}
