//! Classification and OOD-detection metrics.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::model::argmax;

/// Probabilities below this are clamped before taking logs.
pub const NLL_FLOOR: f64 = 1e-12;
pub const ECE_BINS: usize = 15;

fn check_labels(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(shape_err("metrics", probs.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= probs.cols()) {
        return Err(Error::InvalidConfig(format!(
            "label {c} outside [0, {})",
            probs.cols()
        )));
    }
    Ok(())
}

pub fn accuracy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(probs.row(i)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean `−log max(p_y, floor)`.
pub fn nll(probs: &Matrix, labels: &[usize], floor: f64) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[(i, y)].max(floor).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Expected calibration error with equal-width, right-closed confidence bins
/// `(b/B, (b+1)/B]`; a confidence of exactly 0 lands in the first bin.
pub fn ece(probs: &Matrix, labels: &[usize], bins: usize) -> Result<f64> {
    check_labels(probs, labels)?;
    if bins == 0 {
        return Err(Error::InvalidConfig("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let pred = argmax(row);
        let conf = row[pred];
        let b = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        hit_sum[b] += f64::from(u8::from(pred == y));
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hit_sum[b] - conf_sum[b]).abs() / n)
        .sum())
}

/// Rank-based AUROC for separating OOD (positive) from in-distribution
/// points by `scores`, where larger means more likely OOD. Ties count 1/2.
pub fn auroc(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    if scores.len() != is_ood.len() {
        return Err(shape_err("auroc", scores.len(), is_ood.len()));
    }
    let n_pos = is_ood.iter().filter(|&&f| f).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::OneClassOnly);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| is_ood[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// Fraction of OOD points accepted at the largest confidence threshold `t`
/// that still accepts at least 95% of in-distribution points (`s ≥ t`).
/// `confidence` is larger for more in-distribution-looking points, e.g.
/// `1 − uncertainty`.
pub fn fpr_at_95(confidence: &[f64], is_ood: &[bool]) -> Result<f64> {
    if confidence.len() != is_ood.len() {
        return Err(shape_err("fpr_at_95", confidence.len(), is_ood.len()));
    }
    let mut id: Vec<f64> = confidence
        .iter()
        .zip(is_ood)
        .filter(|(_, &o)| !o)
        .map(|(&s, _)| s)
        .collect();
    let n_ood = is_ood.iter().filter(|&&f| f).count();
    if id.is_empty() || n_ood == 0 {
        return Err(Error::OneClassOnly);
    }
    if confidence.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("NaN score".into()));
    }
    id.sort_by(|a, b| b.total_cmp(a));
    let need = (95 * id.len()).div_ceil(100);
    let t = id[need - 1];
    let accepted = confidence
        .iter()
        .zip(is_ood)
        .filter(|(&s, &o)| o && s >= t)
        .count();
    Ok(accepted as f64 / n_ood as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
}

impl EvalReport {
    pub fn compute(probs: &Matrix, labels: &[usize]) -> Result<Self> {
        Ok(Self {
            n: labels.len(),
            accuracy: accuracy(probs, labels)?,
            nll: nll(probs, labels, NLL_FLOOR)?,
            ece: ece(probs, labels, ECE_BINS)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub n_id: usize,
    pub n_ood: usize,
    pub auroc: f64,
    pub fpr_at_95: f64,
    /// Mean `max_c p(c|x)` over the OOD points.
    pub mean_ood_confidence: f64,
}

impl OodReport {
    /// Builds the report from per-point uncertainty scores (`1 − max prob`).
    pub fn from_uncertainty(id: &[f64], ood: &[f64]) -> Result<Self> {
        let scores: Vec<f64> = id.iter().chain(ood).copied().collect();
        let flags: Vec<bool> = id.iter().map(|_| false).chain(ood.iter().map(|_| true)).collect();
        let confidence: Vec<f64> = scores.iter().map(|u| 1.0 - u).collect();
        Ok(Self {
            n_id: id.len(),
            n_ood: ood.len(),
            auroc: auroc(&scores, &flags)?,
            fpr_at_95: fpr_at_95(&confidence, &flags)?,
            mean_ood_confidence: ood.iter().map(|u| 1.0 - u).sum::<f64>() / ood.len() as f64,
        })
    }
}
